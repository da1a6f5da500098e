use std::collections::HashSet;

use accent_core::augment::{apply_random, noise_for_snr, time_stretch, AugmentConfig, HOP};
use accent_core::eval::{eer_from_pairs, relative_change};
use accent_core::manifest::{apportion, load_manifest, save_manifest};
use accent_core::{Label, Manifest, Portion, UtteranceRecord, Waveform};
use proptest::prelude::*;

fn manifest(n_bona: usize, n_spoof: usize) -> Manifest {
    let records = (0..n_bona + n_spoof)
        .map(|i| {
            let label = if i < n_bona { Label::BonaFide } else { Label::Spoof };
            UtteranceRecord::new(format!("r{i:07}"), format!("{i}.wav"), label, "en", "s", Portion::I)
        })
        .collect();
    Manifest::new("p", records).unwrap()
}

/// Rates at every distinct score plus one point above all of them, by
/// direct counting. Bona fide is accepted when `score >= t`.
fn oracle_eer(pairs: &[(f64, Label)]) -> f64 {
    let nb = pairs.iter().filter(|p| p.1 == Label::BonaFide).count() as f64;
    let ns = pairs.len() as f64 - nb;
    let mut ts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let frr = pairs.iter().filter(|p| p.1 == Label::BonaFide && p.0 < t).count() as f64 / nb;
            let far = pairs.iter().filter(|p| p.1 == Label::Spoof && p.0 >= t).count() as f64 / ns;
            (frr, far)
        })
        .collect();
    pts.push((1.0, 0.0));
    for w in pts.windows(2) {
        let ((f0, a0), (f1, a1)) = (w[0], w[1]);
        if f0 == a0 {
            return f0;
        }
        if f1 == a1 {
            return f1;
        }
        if f0 < a0 && f1 > a1 {
            let alpha = (a0 - f0) / ((f1 - f0) - (a1 - a0));
            return f0 + alpha * (f1 - f0);
        }
    }
    unreachable!()
}

fn scored(max_per_class: usize) -> impl Strategy<Value = Vec<(f64, Label)>> {
    (1..=max_per_class, 1..=max_per_class).prop_flat_map(|(nb, ns)| {
        (
            prop::collection::vec(-200i32..200, nb),
            prop::collection::vec(-200i32..200, ns),
        )
            .prop_map(|(b, s)| {
                b.into_iter()
                    .map(|v| (v as f64 / 16.0, Label::BonaFide))
                    .chain(s.into_iter().map(|v| (v as f64 / 16.0, Label::Spoof)))
                    .collect()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn apportion_is_within_one_of_quota(counts in prop::collection::vec(0usize..10_000, 1..6), frac in 0.0f64..=1.0) {
        let n: usize = counts.iter().sum();
        let total = (n as f64 * frac).floor() as usize;
        let q = apportion(&counts, total);
        prop_assert_eq!(q.iter().sum::<usize>(), if n == 0 { 0 } else { total });
        for (&c, &k) in counts.iter().zip(&q) {
            prop_assert!(k <= c);
            if n > 0 {
                let exact = c as f64 * total as f64 / n as f64;
                prop_assert!((k as f64 - exact).abs() < 1.0);
            }
        }
    }

    #[test]
    fn split_sizes_and_strata(nb in 1usize..400, ns in 1usize..400, rt in 1u32..9, rv in 1u32..9, seed in any::<u64>()) {
        let m = manifest(nb, ns);
        let (tr, va) = m.split(rt, rv, seed).unwrap();
        let n = nb + ns;
        prop_assert_eq!(tr.len(), n * rt as usize / (rt + rv) as usize);
        prop_assert_eq!(tr.len() + va.len(), n);
        let exact = nb as f64 * tr.len() as f64 / n as f64;
        prop_assert!((tr.count(Label::BonaFide) as f64 - exact).abs() < 1.0);
        let a: HashSet<&str> = tr.records().iter().map(|r| r.utt_id.as_str()).collect();
        prop_assert!(va.records().iter().all(|r| !a.contains(r.utt_id.as_str())));
        let (tr2, _) = m.split(rt, rv, seed).unwrap();
        prop_assert_eq!(tr.records(), tr2.records());
    }

    #[test]
    fn downsample_is_exact_subset(nb in 1usize..300, ns in 1usize..300, frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let m = manifest(nb, ns);
        let target = ((nb + ns) as f64 * frac).ceil() as usize;
        let d = m.downsample(target, seed).unwrap();
        prop_assert_eq!(d.len(), target);
        prop_assert!(d.records().iter().all(|r| m.get(&r.utt_id) == Some(r)));
        let exact = nb as f64 * target as f64 / (nb + ns) as f64;
        prop_assert!((d.count(Label::BonaFide) as f64 - exact).abs() < 1.0);
        prop_assert!(d.records().windows(2).all(|w| w[0].utt_id < w[1].utt_id));
    }

    #[test]
    fn eer_matches_threshold_sweep(mut pairs in scored(60)) {
        let want = oracle_eer(&pairs);
        let got = eer_from_pairs(&mut pairs).unwrap().eer;
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn eer_ignores_order_and_monotone_maps(pairs in scored(40), rot in 0usize..80) {
        let base = eer_from_pairs(&mut pairs.clone()).unwrap().eer;
        let mut rotated = pairs.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        rotated.reverse();
        prop_assert_eq!(eer_from_pairs(&mut rotated).unwrap().eer, base);
        let mut mapped: Vec<(f64, Label)> = pairs.iter().map(|&(s, l)| (s * s * s + 4.0 * s - 1.0, l)).collect();
        prop_assert_eq!(eer_from_pairs(&mut mapped).unwrap().eer, base);
    }

    #[test]
    fn eer_of_swapped_classes_on_negated_scores(pairs in scored(40)) {
        let base = eer_from_pairs(&mut pairs.clone()).unwrap().eer;
        let mut swapped: Vec<(f64, Label)> = pairs
            .iter()
            .map(|&(s, l)| (-s, if l == Label::BonaFide { Label::Spoof } else { Label::BonaFide }))
            .collect();
        prop_assert!((eer_from_pairs(&mut swapped).unwrap().eer - base).abs() <= 1e-12);
    }

    #[test]
    fn noise_hits_requested_snr(len in 64usize..4000, amp in 0.01f32..1.0, snr in -10.0f64..50.0, key in any::<u64>()) {
        let x: Vec<f32> = (0..len).map(|i| amp * ((i as f32 * 0.37).sin() + 0.3 * (i as f32 * 1.3).cos())).collect();
        let n = noise_for_snr(&x, snr, key).unwrap();
        let p = |v: &[f32]| v.iter().map(|&a| a as f64 * a as f64).sum::<f64>();
        let measured = 10.0 * (p(&x) / p(&n)).log10();
        prop_assert!((measured - snr).abs() < 1e-3, "{} vs {}", measured, snr);
    }

    #[test]
    fn stretch_length_tracks_rate(len in 2000usize..12000, rate in 0.5f64..2.0) {
        let x: Vec<f32> = (0..len).map(|i| (i as f32 * 0.05).sin()).collect();
        let y = time_stretch(&x, rate).unwrap();
        prop_assert!((y.len() as f64 - len as f64 / rate).abs() <= HOP as f64);
    }

    #[test]
    fn relative_change_inverts(r in 0.01f64..100.0, v in 0.0f64..100.0) {
        let p = relative_change(r, v).unwrap();
        prop_assert!((r * (1.0 + p / 100.0) - v).abs() < 1e-9);
    }
}

#[test]
fn apply_random_depends_only_on_key() {
    let cfg = AugmentConfig {
        apply_prob: 1.0,
        ..AugmentConfig::default()
    };
    let waves: Vec<(String, Waveform)> = (0..12)
        .map(|i| {
            let s = (0..4000).map(|k| ((k * (i + 3)) as f32 * 0.01).sin() * 0.3).collect();
            (format!("utt{i}"), Waveform::new(s, 16_000))
        })
        .collect();
    let forward: Vec<Waveform> = waves
        .iter()
        .map(|(id, w)| apply_random(w, &cfg, id, 3, 9).unwrap())
        .collect();
    let mut backward: Vec<Waveform> = waves
        .iter()
        .rev()
        .map(|(id, w)| apply_random(w, &cfg, id, 3, 9).unwrap())
        .collect();
    backward.reverse();
    assert_eq!(forward, backward);
    let other_epoch = apply_random(&waves[0].1, &cfg, &waves[0].0, 4, 9).unwrap();
    assert_ne!(other_epoch, forward[0]);
}

#[test]
fn manifest_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest(5, 7).into_records();
    m[0].accent = Some("en-AU".into());
    m[1].duration_sec = Some(1.25);
    m[2].speaker_id = Some("spk".into());
    let m = Manifest::new("rt", m).unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    save_manifest(&m, &a).unwrap();
    save_manifest(&load_manifest(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
