//! Test support: reference oracles and deterministic generators.
//!
//! The reference broker simulator reimplements the routing semantics as a
//! plain single-threaded fold over an event log, sharing no code with the
//! real broker. Equivalence tests replay the same log through both and
//! compare delivery multisets and per-sender delivery order.

use std::collections::{BTreeMap, BTreeSet};

/// One scripted middleware event. Clients are numbered; the harness maps them
/// to real connections when replaying against a live broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    Subscribe { client: usize, channel: String },
    Publish { client: usize, channel: String, payload: Vec<u8> },
    Register { client: usize, service: String },
    Request { client: usize, service: String, payload: Vec<u8> },
}

/// A delivery observed at a client.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum SimDelivery {
    /// Publication received on a channel.
    Publication { channel: String, payload: Vec<u8> },
    /// Request arrived at the provider of a service.
    RequestIn { service: String, payload: Vec<u8> },
    /// Response to the client's own request.
    ResponseIn { service: String, payload: Vec<u8> },
    /// Error frame (unknown service and similar).
    ErrorIn { reason: String },
}

/// Single-threaded reference simulation of the broker semantics.
///
/// Providers answer every request by echoing the payload, which matches how
/// the live-replay harness wires its provider clients. Returns the deliveries
/// observed per client, in order.
pub fn simulate(events: &[SimEvent], clients: usize) -> Vec<Vec<SimDelivery>> {
    let mut deliveries: Vec<Vec<SimDelivery>> = vec![Vec::new(); clients];
    let mut subscriptions: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut services: BTreeMap<String, usize> = BTreeMap::new();

    for event in events {
        match event {
            SimEvent::Subscribe { client, channel } => {
                subscriptions.entry(channel.clone()).or_default().insert(*client);
            }
            SimEvent::Publish {
                client,
                channel,
                payload,
            } => {
                if let Some(subs) = subscriptions.get(channel) {
                    for &subscriber in subs {
                        if subscriber != *client {
                            deliveries[subscriber].push(SimDelivery::Publication {
                                channel: channel.clone(),
                                payload: payload.clone(),
                            });
                        }
                    }
                }
            }
            SimEvent::Register { client, service } => {
                if services.contains_key(service) {
                    deliveries[*client].push(SimDelivery::ErrorIn {
                        reason: "duplicate-service".to_string(),
                    });
                } else {
                    services.insert(service.clone(), *client);
                }
            }
            SimEvent::Request {
                client,
                service,
                payload,
            } => match services.get(service) {
                Some(&provider) => {
                    deliveries[provider].push(SimDelivery::RequestIn {
                        service: service.clone(),
                        payload: payload.clone(),
                    });
                    // Echo provider: the response carries the request payload.
                    deliveries[*client].push(SimDelivery::ResponseIn {
                        service: service.clone(),
                        payload: payload.clone(),
                    });
                }
                None => {
                    deliveries[*client].push(SimDelivery::ErrorIn {
                        reason: "no-such-service".to_string(),
                    });
                }
            },
        }
    }
    deliveries
}

/// Deterministic event-log generator for the equivalence tests.
///
/// `publish_only_clients` never subscribe, so per-sender ordering can be
/// checked without self-delivery exclusions muddying the picture.
pub fn generate_events(seed: u64, count: usize, clients: usize) -> Vec<SimEvent> {
    let mut rng = SplitMix64(seed);
    let channels = ["att", "tm", "img", "pwr"];
    let services = ["echo-a", "echo-b"];
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let client = (rng.next() as usize) % clients;
        match rng.next() % 10 {
            0..=2 => events.push(SimEvent::Subscribe {
                client,
                channel: channels[(rng.next() as usize) % channels.len()].to_string(),
            }),
            3..=6 => {
                let mut payload = vec![client as u8];
                payload.extend_from_slice(&rng.next().to_be_bytes());
                events.push(SimEvent::Publish {
                    client,
                    channel: channels[(rng.next() as usize) % channels.len()].to_string(),
                    payload,
                });
            }
            7 => events.push(SimEvent::Register {
                client,
                service: services[(rng.next() as usize) % services.len()].to_string(),
            }),
            _ => events.push(SimEvent::Request {
                client,
                service: services[(rng.next() as usize) % services.len()].to_string(),
                payload: rng.next().to_be_bytes().to_vec(),
            }),
        }
    }
    events
}

/// Small deterministic RNG so generated logs are reproducible without pulling
/// rand into the library itself.
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulator_basics() {
        let events = vec![
            SimEvent::Subscribe {
                client: 1,
                channel: "a".into(),
            },
            SimEvent::Subscribe {
                client: 2,
                channel: "a".into(),
            },
            SimEvent::Publish {
                client: 0,
                channel: "a".into(),
                payload: b"x".to_vec(),
            },
        ];
        let out = simulate(&events, 3);
        assert!(out[0].is_empty());
        assert_eq!(out[1].len(), 1);
        assert_eq!(out[2].len(), 1);
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(generate_events(7, 100, 4), generate_events(7, 100, 4));
        assert_ne!(generate_events(7, 100, 4), generate_events(8, 100, 4));
    }
}
