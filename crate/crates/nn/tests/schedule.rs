use accent_nn::{lr_at, ssl_training_policy, TrainConfig};
use proptest::prelude::*;

fn cfg(base: f64, warmup: u64) -> TrainConfig {
    TrainConfig {
        base_lr: base,
        warmup_steps: warmup,
        ..TrainConfig::default()
    }
}

#[test]
fn reference_points() {
    let c = cfg(3e-4, 1000);
    assert_eq!(lr_at(1000, &c), 3e-4);
    assert_eq!(lr_at(4000, &c), 1.5e-4);
    assert_eq!(lr_at(500, &c), 1.5e-4);
}

#[test]
fn ssl_unfreezes_after_freeze_window() {
    let c = TrainConfig::default();
    assert!(ssl_training_policy(10, &c).0);
    assert!(!ssl_training_policy(11, &c).0);
    assert_eq!(ssl_training_policy(5, &c).1, 1.0);
    assert!((ssl_training_policy(7, &c).1 - 0.81).abs() < 1e-12);
}

proptest! {
    #[test]
    fn peaks_at_warmup(base in 1e-6f64..1.0, warmup in 1u64..5000, step in 1u64..50_000) {
        let c = cfg(base, warmup);
        let lr = lr_at(step, &c);
        prop_assert!(lr > 0.0 && lr <= base * (1.0 + 1e-12));
        if step < warmup {
            prop_assert!(lr <= lr_at(step + 1, &c));
        } else {
            prop_assert!(lr >= lr_at(step + 1, &c));
        }
    }

    #[test]
    fn decay_is_inverse_sqrt(base in 1e-6f64..1.0, warmup in 1u64..2000, k in 1u64..50) {
        let c = cfg(base, warmup);
        let s = warmup * k;
        let ratio = lr_at(4 * s, &c) / lr_at(s, &c);
        prop_assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ssl_scale_warms_then_decays(freeze in 0usize..20, warm in 1usize..10, gamma in 0.5f64..1.0, epoch in 1usize..60) {
        let c = TrainConfig {
            ssl_freeze_epochs: freeze,
            ssl_warmup_epochs: warm,
            ssl_gamma: gamma,
            ..TrainConfig::default()
        };
        let (frozen, scale) = ssl_training_policy(epoch, &c);
        prop_assert_eq!(frozen, epoch <= freeze);
        prop_assert!(scale > 0.0 && scale <= 1.0);
        let next = ssl_training_policy(epoch + 1, &c).1;
        if epoch < warm {
            prop_assert!(next > scale);
        } else {
            prop_assert!(next < scale);
        }
    }
}
