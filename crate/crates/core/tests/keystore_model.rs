//! Random reserve/sign/crash/storage-failure interleavings against a
//! reference model: no index ever reaches the signer twice.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use schedca::keystore::{AuditTrail, KeyStore, KeyStoreError, MemoryMedium, NoWrap};
use schedca::xmss::{self, XmssParams, ENTROPY_BYTES};

const STEPS: usize = 1500;

/// One h=10 key state, generated once and restored into each case.
fn initial_state() -> &'static Vec<u8> {
    static STATE: OnceLock<Vec<u8>> = OnceLock::new();
    STATE.get_or_init(|| {
        let medium = MemoryMedium::new();
        KeyStore::create(Box::new(medium.clone()), Box::new(NoWrap), XmssParams::SHA2_10_256, &[0x42; ENTROPY_BYTES])
            .unwrap();
        medium.snapshot().unwrap()
    })
}

#[derive(Debug, Clone)]
enum Op {
    Reserve,
    /// Signs an index chosen relative to the model's view.
    Sign(Pick),
    Crash,
    FailWrites(bool),
}

#[derive(Debug, Clone, Copy)]
enum Pick {
    Outstanding(usize),
    Consumed(usize),
    Future(u32),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => Just(Op::Reserve),
        4 => (0usize..8).prop_map(|i| Op::Sign(Pick::Outstanding(i))),
        1 => (0usize..64).prop_map(|i| Op::Sign(Pick::Consumed(i))),
        1 => (0u32..4).prop_map(|d| Op::Sign(Pick::Future(d))),
        1 => Just(Op::Crash),
        1 => any::<bool>().prop_map(Op::FailWrites),
    ]
}

struct Model {
    /// Highest value the store ever handed out, plus one.
    next: u32,
    outstanding: BTreeSet<u32>,
    consumed: Vec<u32>,
    signed: Vec<u32>,
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn keystore_matches_model(ops in prop::collection::vec(op(), STEPS..=STEPS)) {
        let medium = MemoryMedium::new();
        medium.restore(Some(initial_state().clone()));
        let audit = AuditTrail::new();
        let open = |m: &MemoryMedium| {
            let mut s = KeyStore::open(Box::new(m.clone()), Box::new(NoWrap)).unwrap();
            s.set_audit(Arc::new(audit.clone()));
            s
        };
        let mut store = open(&medium);
        let pk = store.public_key().clone();
        let mut model = Model { next: 0, outstanding: BTreeSet::new(), consumed: Vec::new(), signed: Vec::new() };
        let mut failing = false;

        for op in ops {
            match op {
                Op::Reserve => match store.reserve_index() {
                    Ok(i) => {
                        prop_assert!(!failing, "reserve succeeded without durable storage");
                        prop_assert_eq!(i, model.next);
                        model.next += 1;
                        model.outstanding.insert(i);
                        model.consumed.push(i);
                    }
                    Err(KeyStoreError::Storage(_)) => prop_assert!(failing),
                    Err(KeyStoreError::Exhausted { .. }) => prop_assert_eq!(model.next, 1024),
                    Err(e) => prop_assert!(false, "unexpected {}", e),
                },
                Op::Sign(pick) => {
                    let index = match pick {
                        Pick::Outstanding(k) => match model.outstanding.iter().nth(k) {
                            Some(i) => *i,
                            None => continue,
                        },
                        Pick::Consumed(k) if !model.consumed.is_empty() => model.consumed[k % model.consumed.len()],
                        Pick::Consumed(_) => continue,
                        Pick::Future(d) => store.next_index() + d,
                    };
                    let msg = index.to_be_bytes();
                    match store.sign_with_reserved(index, &msg) {
                        Ok(sig) => {
                            prop_assert!(model.outstanding.remove(&index), "signed {} without a reservation", index);
                            prop_assert_eq!(sig.index(), index);
                            prop_assert!(xmss::verify(&pk, &msg, &sig));
                            model.signed.push(index);
                        }
                        Err(KeyStoreError::AlreadyConsumed { .. } | KeyStoreError::NeverReserved { .. }) => {
                            prop_assert!(!model.outstanding.contains(&index));
                        }
                        Err(e) => prop_assert!(false, "unexpected {}", e),
                    }
                }
                Op::Crash => {
                    drop(store);
                    medium.fail_writes(false);
                    failing = false;
                    store = open(&medium);
                    // reservations die with the process
                    model.outstanding.clear();
                    prop_assert_eq!(store.next_index(), model.next);
                }
                Op::FailWrites(f) => {
                    medium.fail_writes(f);
                    failing = f;
                }
            }
        }
        prop_assert!(audit.duplicates().is_empty());
        prop_assert_eq!(audit.indices(), model.signed);
    }
}
