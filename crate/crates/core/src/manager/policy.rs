use serde::{Deserialize, Serialize};

use crate::servable::ServableState;

/// Order of the load and unload when a servable changes versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VersionPolicy {
    /// Load the new version before unloading the old one.
    AvailabilityPreserving,
    /// Unload the old version before loading the new one.
    ResourcePreserving,
}

impl std::str::FromStr for VersionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "availability" => Ok(VersionPolicy::AvailabilityPreserving),
            "resource" => Ok(VersionPolicy::ResourcePreserving),
            other => Err(format!(
                "unknown version policy {other:?} (expected availability or resource)"
            )),
        }
    }
}

/// The policy's view of one version record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionView {
    pub version: u64,
    pub state: ServableState,
    pub is_aspired: bool,
}

impl VersionView {
    pub fn new(version: u64, state: ServableState, is_aspired: bool) -> Self {
        Self {
            version,
            state,
            is_aspired,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyAction {
    Load(u64),
    Unload(u64),
    None,
}

/// Next lifecycle action for the versions of one servable.
///
/// Availability-preserving: load the highest aspired `New` version; failing
/// that, unload the lowest unaspired `Ready` version once some aspired
/// version is `Ready` or nothing is aspired at all.
///
/// Resource-preserving: unload the lowest unaspired `Ready` version; failing
/// that, load the highest aspired `New` version once no unaspired version
/// is `Ready` or `Unloading`.
pub fn policy_next_action(versions: &[VersionView], policy: VersionPolicy) -> PolicyAction {
    let highest_aspired_new = versions
        .iter()
        .filter(|v| v.is_aspired && v.state == ServableState::New)
        .map(|v| v.version)
        .max();
    let lowest_unaspired_ready = versions
        .iter()
        .filter(|v| !v.is_aspired && v.state == ServableState::Ready)
        .map(|v| v.version)
        .min();

    match policy {
        VersionPolicy::AvailabilityPreserving => {
            if let Some(v) = highest_aspired_new {
                return PolicyAction::Load(v);
            }
            let aspired_ready = versions
                .iter()
                .any(|v| v.is_aspired && v.state == ServableState::Ready);
            let nothing_aspired = !versions.iter().any(|v| v.is_aspired);
            match lowest_unaspired_ready {
                Some(v) if aspired_ready || nothing_aspired => PolicyAction::Unload(v),
                _ => PolicyAction::None,
            }
        }
        VersionPolicy::ResourcePreserving => {
            if let Some(v) = lowest_unaspired_ready {
                return PolicyAction::Unload(v);
            }
            let unaspired_resident = versions.iter().any(|v| {
                !v.is_aspired
                    && matches!(v.state, ServableState::Ready | ServableState::Unloading)
            });
            match highest_aspired_new {
                Some(v) if !unaspired_resident => PolicyAction::Load(v),
                _ => PolicyAction::None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ServableState::*;
    use VersionPolicy::*;

    fn view(version: u64, state: ServableState, is_aspired: bool) -> VersionView {
        VersionView::new(version, state, is_aspired)
    }

    #[test]
    fn availability_loads_before_unloading() {
        let vs = [view(1, Ready, false), view(2, New, true)];
        assert_eq!(policy_next_action(&vs, AvailabilityPreserving), PolicyAction::Load(2));
        let vs = [view(1, Ready, false), view(2, Loading, true)];
        assert_eq!(policy_next_action(&vs, AvailabilityPreserving), PolicyAction::None);
        let vs = [view(1, Ready, false), view(2, Ready, true)];
        assert_eq!(policy_next_action(&vs, AvailabilityPreserving), PolicyAction::Unload(1));
    }

    #[test]
    fn resource_unloads_before_loading() {
        let vs = [view(1, Ready, false), view(2, New, true)];
        assert_eq!(policy_next_action(&vs, ResourcePreserving), PolicyAction::Unload(1));
        let vs = [view(1, Unloading, false), view(2, New, true)];
        assert_eq!(policy_next_action(&vs, ResourcePreserving), PolicyAction::None);
        let vs = [view(1, Disabled, false), view(2, New, true)];
        assert_eq!(policy_next_action(&vs, ResourcePreserving), PolicyAction::Load(2));
    }

    #[test]
    fn empty_and_unaspired() {
        for p in [AvailabilityPreserving, ResourcePreserving] {
            assert_eq!(policy_next_action(&[], p), PolicyAction::None);
            assert_eq!(
                policy_next_action(&[view(1, Ready, false)], p),
                PolicyAction::Unload(1)
            );
        }
    }

    #[test]
    fn failed_update_keeps_old_version_under_availability() {
        let vs = [view(1, Ready, false), view(2, Error("bad".into()), true)];
        assert_eq!(policy_next_action(&vs, AvailabilityPreserving), PolicyAction::None);
    }

    #[test]
    fn picks_highest_load_and_lowest_unload() {
        let vs = [view(1, New, true), view(3, New, true), view(2, New, true)];
        assert_eq!(policy_next_action(&vs, AvailabilityPreserving), PolicyAction::Load(3));
        let vs = [view(5, Ready, false), view(2, Ready, false), view(9, Ready, true)];
        assert_eq!(policy_next_action(&vs, AvailabilityPreserving), PolicyAction::Unload(2));
        assert_eq!(policy_next_action(&vs, ResourcePreserving), PolicyAction::Unload(2));
    }

    #[test]
    fn policy_names() {
        assert_eq!("availability".parse(), Ok(AvailabilityPreserving));
        assert_eq!("resource".parse(), Ok(ResourcePreserving));
        assert!("greedy".parse::<VersionPolicy>().is_err());
    }

    fn any_state() -> impl proptest::strategy::Strategy<Value = ServableState> {
        use proptest::prelude::*;
        prop_oneof![
            Just(New),
            Just(Loading),
            Just(Ready),
            Just(Unloading),
            Just(Disabled),
            Just(Error("e".into())),
        ]
    }

    proptest::proptest! {
        #[test]
        fn safety_properties(
            records in proptest::collection::vec((any_state(), proptest::bool::ANY), 0..6),
        ) {
            let vs: Vec<VersionView> = records
                .into_iter()
                .enumerate()
                .map(|(i, (s, a))| view(i as u64 + 1, s, a))
                .collect();
            let find = |v: u64| vs.iter().find(|x| x.version == v).unwrap();
            let aspired_ready = vs.iter().any(|v| v.is_aspired && v.state == Ready);
            let any_aspired = vs.iter().any(|v| v.is_aspired);

            match policy_next_action(&vs, AvailabilityPreserving) {
                PolicyAction::Load(v) => {
                    proptest::prop_assert!(find(v).is_aspired && find(v).state == New);
                }
                PolicyAction::Unload(v) => {
                    proptest::prop_assert!(!find(v).is_aspired && find(v).state == Ready);
                    // Never drops the last serving version while a replacement is pending.
                    proptest::prop_assert!(aspired_ready || !any_aspired);
                }
                PolicyAction::None => {}
            }
            match policy_next_action(&vs, ResourcePreserving) {
                PolicyAction::Load(v) => {
                    proptest::prop_assert!(find(v).is_aspired && find(v).state == New);
                    // Never two versions resident across a swap.
                    proptest::prop_assert!(!vs.iter().any(|x| !x.is_aspired
                        && matches!(x.state, Ready | Unloading)));
                }
                PolicyAction::Unload(v) => {
                    proptest::prop_assert!(!find(v).is_aspired && find(v).state == Ready);
                }
                PolicyAction::None => {
                    proptest::prop_assert!(!vs.iter().any(|x| !x.is_aspired && x.state == Ready));
                }
            }
        }
    }
}
