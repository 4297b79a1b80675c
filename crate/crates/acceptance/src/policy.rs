//! Exhaustive comparison of the version policy with an independent rule
//! table over every small version-state vector.

use modelserve_core::manager::{policy_next_action, PolicyAction, VersionPolicy, VersionView};
use modelserve_core::ServableState;

use crate::Outcome;

fn states() -> [ServableState; 6] {
    use ServableState::*;
    [New, Loading, Ready, Unloading, Disabled, Error("failed".into())]
}

/// A rule row: an action kind is admissible for a version when the
/// version matches `(state, aspired)` and the servable-wide guard holds.
/// Earlier rows win; within a row loads prefer the highest version and
/// unloads the lowest.
struct Rule {
    load: bool,
    state: fn(&ServableState) -> bool,
    aspired: bool,
    guard: fn(&[VersionView]) -> bool,
}

fn any(vs: &[VersionView], f: impl Fn(&VersionView) -> bool) -> bool {
    vs.iter().any(f)
}

fn rules(policy: VersionPolicy) -> Vec<Rule> {
    let is_new = |s: &ServableState| *s == ServableState::New;
    let is_ready = |s: &ServableState| *s == ServableState::Ready;
    match policy {
        VersionPolicy::AvailabilityPreserving => vec![
            Rule {
                load: true,
                state: is_new,
                aspired: true,
                guard: |_| true,
            },
            Rule {
                load: false,
                state: is_ready,
                aspired: false,
                guard: |vs| {
                    any(vs, |v| v.is_aspired && v.state == ServableState::Ready)
                        || !any(vs, |v| v.is_aspired)
                },
            },
        ],
        VersionPolicy::ResourcePreserving => vec![
            Rule {
                load: false,
                state: is_ready,
                aspired: false,
                guard: |_| true,
            },
            Rule {
                load: true,
                state: is_new,
                aspired: true,
                guard: |vs| !any(vs, |v| !v.is_aspired && v.state.has_payload()),
            },
        ],
    }
}

pub fn oracle(versions: &[VersionView], policy: VersionPolicy) -> PolicyAction {
    for rule in rules(policy) {
        if !(rule.guard)(versions) {
            continue;
        }
        let matching = versions
            .iter()
            .filter(|v| (rule.state)(&v.state) && v.is_aspired == rule.aspired)
            .map(|v| v.version);
        let pick = if rule.load { matching.max() } else { matching.min() };
        if let Some(v) = pick {
            return if rule.load {
                PolicyAction::Load(v)
            } else {
                PolicyAction::Unload(v)
            };
        }
    }
    PolicyAction::None
}

/// Calls `f` with every vector of up to `max_len` versions over all
/// states and aspiration flags, in every order of the version numbers.
pub fn for_each_vector(max_len: usize, mut f: impl FnMut(&[VersionView])) {
    let states = states();
    let cells = states.len() * 2;
    for len in 0..=max_len {
        let mut numbers: Vec<u64> = (1..=len as u64).map(|v| v * 3).collect();
        let orders = permutations(&mut numbers);
        for code in 0..cells.pow(len as u32) {
            let mut rest = code;
            let cells_of: Vec<(ServableState, bool)> = (0..len)
                .map(|_| {
                    let c = rest % cells;
                    rest /= cells;
                    (states[c / 2].clone(), c % 2 == 1)
                })
                .collect();
            for order in &orders {
                let vs: Vec<VersionView> = order
                    .iter()
                    .zip(&cells_of)
                    .map(|(&v, (s, a))| VersionView::new(v, s.clone(), *a))
                    .collect();
                f(&vs);
            }
        }
    }
}

fn permutations(items: &mut Vec<u64>) -> Vec<Vec<u64>> {
    fn go(k: usize, items: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            go(k + 1, items, out);
            items.swap(k, i);
        }
    }
    let mut out = Vec::new();
    go(0, items, &mut out);
    out
}

pub fn check() -> Outcome {
    let mut checked = 0u64;
    let mut disagreements = Vec::new();
    for policy in [VersionPolicy::AvailabilityPreserving, VersionPolicy::ResourcePreserving] {
        for_each_vector(4, |vs| {
            checked += 1;
            let (got, want) = (policy_next_action(vs, policy), oracle(vs, policy));
            if got != want && disagreements.len() < 3 {
                disagreements.push(format!("{policy:?} {vs:?}: {got:?} vs {want:?}"));
            }
        });
    }
    Outcome::new(
        disagreements.is_empty(),
        if disagreements.is_empty() {
            format!("{checked} vectors, all agree")
        } else {
            format!("{checked} vectors, first disagreements: {}", disagreements.join("; "))
        },
    )
}
