//! Multi-producer, multi-consumer bus of lifecycle transition events.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use crossbeam_channel::{Receiver, Sender};

use crate::servable::{validate_transition, ServableId, ServableState};

/// Nanoseconds since the first call in this process. Monotonic.
pub fn monotonic_nanos() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateEvent {
    pub id: ServableId,
    pub from: ServableState,
    pub to: ServableState,
    pub timestamp_ns: u64,
    /// Tag of the thread pool whose thread did the work behind the transition.
    pub executor_tag: String,
}

/// Events for one id reach every subscriber in emission order, provided the
/// emitter serializes emissions per id (the manager emits under its lock).
#[derive(Default)]
pub struct EventBus {
    subscribers: Mutex<Vec<Sender<StateEvent>>>,
    log: Option<Mutex<Vec<StateEvent>>>,
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bus that also keeps every event in memory for later audit.
    pub fn recording() -> Self {
        Self {
            subscribers: Mutex::new(Vec::new()),
            log: Some(Mutex::new(Vec::new())),
        }
    }

    pub fn subscribe(&self) -> Receiver<StateEvent> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.subscribers.lock().unwrap().push(tx);
        rx
    }

    pub fn emit(&self, event: StateEvent) {
        if let Some(log) = &self.log {
            log.lock().unwrap().push(event.clone());
        }
        let mut subs = self.subscribers.lock().unwrap();
        subs.retain(|tx| tx.send(event.clone()).is_ok());
    }

    /// Recorded events, or an empty list when the bus is not recording.
    pub fn recorded(&self) -> Vec<StateEvent> {
        self.log
            .as_ref()
            .map(|log| log.lock().unwrap().clone())
            .unwrap_or_default()
    }
}

impl std::fmt::Debug for EventBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventBus")
            .field("recording", &self.log.is_some())
            .finish()
    }
}

/// Replays each id's events through [`validate_transition`]. A record may be
/// restarted after reaching a terminal state; the restart begins at `New`.
pub fn validate_event_paths(events: &[StateEvent]) -> Result<(), String> {
    let mut current: HashMap<&ServableId, &ServableState> = HashMap::new();
    for (i, ev) in events.iter().enumerate() {
        let state = current.get(&ev.id).copied();
        let continues = match state {
            None => ev.from == ServableState::New,
            Some(s) if s.is_terminal() => ev.from == ServableState::New,
            Some(s) => *s == ev.from,
        };
        if !continues {
            return Err(format!(
                "event {i} for {}: from {} does not follow {:?}",
                ev.id, ev.from, state
            ));
        }
        if !validate_transition(&ev.from, &ev.to) {
            return Err(format!(
                "event {i} for {}: illegal edge {} -> {}",
                ev.id, ev.from, ev.to
            ));
        }
        current.insert(&ev.id, &ev.to);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: u64, from: ServableState, to: ServableState) -> StateEvent {
        StateEvent {
            id: ServableId::new("m", v),
            from,
            to,
            timestamp_ns: monotonic_nanos(),
            executor_tag: "manager".into(),
        }
    }

    #[test]
    fn subscribers_see_emission_order() {
        use ServableState::*;
        let bus = EventBus::recording();
        let a = bus.subscribe();
        let b = bus.subscribe();
        bus.emit(ev(1, New, Loading));
        bus.emit(ev(1, Loading, Ready));
        for rx in [a, b] {
            let got: Vec<_> = rx.try_iter().map(|e| e.to).collect();
            assert_eq!(got, vec![Loading, Ready]);
        }
        assert_eq!(bus.recorded().len(), 2);
    }

    #[test]
    fn dropped_subscribers_are_pruned() {
        let bus = EventBus::new();
        drop(bus.subscribe());
        bus.emit(ev(1, ServableState::New, ServableState::Loading));
        assert!(bus.subscribers.lock().unwrap().is_empty());
    }

    #[test]
    fn path_validation() {
        use ServableState::*;
        let good = vec![
            ev(1, New, Loading),
            ev(2, New, Loading),
            ev(1, Loading, Ready),
            ev(1, Ready, Unloading),
            ev(1, Unloading, Disabled),
            ev(1, New, Loading),
        ];
        validate_event_paths(&good).unwrap();
        let skipped = vec![ev(1, New, Loading), ev(1, Ready, Unloading)];
        assert!(validate_event_paths(&skipped).is_err());
        let illegal = vec![ev(1, New, Ready)];
        assert!(validate_event_paths(&illegal).is_err());
    }

    #[test]
    fn timestamps_are_monotonic() {
        let a = monotonic_nanos();
        let b = monotonic_nanos();
        assert!(b >= a);
    }
}
