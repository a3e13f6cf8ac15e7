use std::sync::Arc;

use fovea_core::env::{efficiency_reward, total_reward, EnvConfig, EpisodeCondition};
use fovea_core::imaging::{FixationGeometry, Image, MixedAcuityImage};
use fovea_core::models::OuNoise;
use fovea_core::params::{AdamState, ParameterSet};
use fovea_core::protocol::{decode, decode_prefix, encode, Message, WirePixel};
use fovea_core::tensor::Tensor;
use fovea_core::trainer::{epsilon, ReplayBuffer, Transition};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn high_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Brute force over every pixel of the frame.
fn union_popcount(fixations: &[(f64, f64, f64)], h: usize, w: usize) -> usize {
    let mut n = 0;
    for py in 0..h {
        for px in 0..w {
            let hit = fixations.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (px as f64 - cx, py as f64 - cy);
                dx * dx + dy * dy <= r * r
            });
            n += hit as usize;
        }
    }
    n
}

fn fixation() -> impl Strategy<Value = (f64, f64, f64)> {
    (-6.0..54.0f64, -6.0..54.0f64, 0.0..18.0f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn revealed_count_is_the_disc_union(h in 4usize..48, w in 4usize..48, seq in prop::collection::vec(fixation(), 1..8), seed in any::<u64>()) {
        let high = high_image(h, w, seed);
        let mut m = MixedAcuityImage::from_canvas(Image::filled(h, w, 0.5));
        let mut total = 0;
        for (k, &(cx, cy, r)) in seq.iter().enumerate() {
            let new = m.reveal_fixation(&FixationGeometry::new(cx, cy, r), &high).unwrap();
            total += new;
            prop_assert_eq!(new, union_popcount(&seq[..=k], h, w) - union_popcount(&seq[..k], h, w));
            prop_assert_eq!(m.revealed_count(), union_popcount(&seq[..=k], h, w));
        }
        prop_assert_eq!(total, m.revealed_count());
        prop_assert_eq!(m.mask().iter().filter(|b| **b).count(), m.revealed_count());
        for py in 0..h {
            for px in 0..w {
                if m.is_revealed(px, py) {
                    prop_assert_eq!(m.canvas().pixel(py, px), high.pixel(py, px));
                } else {
                    prop_assert_eq!(m.canvas().pixel(py, px), [0.5; 3]);
                }
            }
        }
        let &(cx, cy, r) = seq.last().unwrap();
        prop_assert_eq!(m.reveal_fixation(&FixationGeometry::new(cx, cy, r), &high).unwrap(), 0);
    }
}

fn message() -> impl Strategy<Value = Message> {
    let pixel = (any::<u16>(), any::<u16>(), any::<[u8; 3]>()).prop_map(|(px, py, rgb)| WirePixel { px, py, rgb });
    prop_oneof![
        (any::<u16>(), any::<u16>(), any::<u16>(), any::<u16>()).prop_map(|(height, width, thumb_height, thumb_width)| Message::Hello { height, width, thumb_height, thumb_width }),
        prop::collection::vec(any::<u8>(), 0..300).prop_map(|rgb| Message::Thumbnail { rgb }),
        (any::<u32>(), any::<u32>(), any::<u32>()).prop_map(|(x, y, l)| Message::FixationRequest { x: f32::from_bits(x), y: f32::from_bits(y), l: f32::from_bits(l) }),
        prop::collection::vec(pixel, 0..80).prop_map(|pixels| Message::PatchResponse { pixels }),
        (any::<u16>(), any::<u32>()).prop_map(|(class, e)| Message::Prediction { class, entropy: f32::from_bits(e) }),
        Just(Message::Done),
    ]
}

proptest! {
    #[test]
    fn codec_round_trips_bit_for_bit(msgs in prop::collection::vec(message(), 1..6)) {
        let mut stream = Vec::new();
        for m in &msgs {
            let bytes = encode(m);
            prop_assert_eq!(bytes.len(), m.frame_len());
            // Compare re-encodings so NaN payloads count as equal when their bits are.
            prop_assert_eq!(encode(&decode(&bytes).unwrap()), bytes.clone());
            stream.extend_from_slice(&bytes);
        }
        let mut at = 0;
        for m in &msgs {
            let (got, used) = decode_prefix(&stream[at..]).unwrap().unwrap();
            prop_assert_eq!(encode(&got), encode(m));
            at += used;
        }
        prop_assert_eq!(at, stream.len());
    }

    #[test]
    fn truncated_frames_never_decode(m in message(), cut in 0.0..1.0f64) {
        let bytes = encode(&m);
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode(&bytes[..keep]).is_err());
        prop_assert!(decode_prefix(&bytes[..keep]).unwrap().is_none());
    }

    #[test]
    fn soft_update_drift_is_bounded(values in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..40), tau in 0.0..=1.0f64) {
        let (online, target): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        let n = online.len();
        let mut src = ParameterSet::new();
        src.insert("w", Tensor::new(&[n], online.clone()).unwrap()).unwrap();
        let mut dst = ParameterSet::new();
        dst.insert("w", Tensor::new(&[n], target.clone()).unwrap()).unwrap();
        dst.soft_update_from(&src, tau).unwrap();
        let after = dst.get("w").unwrap().data();
        let spread = online.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for i in 0..n {
            let drift = (after[i] - target[i]).abs();
            prop_assert!(drift <= tau * (online[i] - target[i]).abs() * (1.0 + 1e-12) + 1e-15);
            prop_assert!(drift <= tau * spread * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn epsilon_never_increases(u in 0usize..200_000, step in 1usize..5000) {
        let (a, b) = (epsilon(u, 0.7, 0.96, 1000), epsilon(u + step, 0.7, 0.96, 1000));
        prop_assert!(b <= a);
        prop_assert!(a > 0.0 && a <= 0.7);
    }

    #[test]
    fn replay_keeps_the_newest(capacity in 1usize..20, pushes in 0usize..60) {
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..pushes {
            buf.push(transition(i as f64));
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let want: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn total_reward_is_exact(ra in -10.0..10.0f64, re in prop::sample::select(vec![0.0, -1.0]), lambda in 0.0..20.0f64) {
        prop_assert_eq!(total_reward(ra, re, lambda), ra + lambda * re);
        prop_assert_eq!(total_reward(ra, re, 0.0), ra);
    }
}

fn transition(reward: f64) -> Transition {
    Transition {
        state: vec![reward],
        action: [0.0; 3],
        oracle: [0.0; 3],
        reward,
        next_state: vec![reward],
        next_action: [0.0; 3],
        condition: Arc::new(EpisodeCondition { feat_high: vec![], label: 0 }),
        terminal: false,
    }
}

#[test]
fn efficiency_reward_truth_table() {
    assert_eq!(efficiency_reward(3, 5, 0.9, 0.25), 0.0);
    assert_eq!(efficiency_reward(5, 5, 0.30, 0.25), -1.0);
    assert_eq!(efficiency_reward(5, 5, 0.20, 0.25), 0.0);
    // The indicator is strict.
    assert_eq!(efficiency_reward(5, 5, 0.25, 0.25), 0.0);
    assert_eq!(total_reward(0.8, 0.0, 5.0), 0.8);
    assert_eq!(total_reward(0.8, -1.0, 5.0), 0.8 - 5.0);
}

#[test]
fn soft_update_edge_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let online = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let target = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let set = |t: &Tensor| {
        let mut p = ParameterSet::new();
        p.insert("w", t.clone()).unwrap();
        p
    };
    let src = set(&online);
    for (tau, want) in [(0.0, target.data().to_vec()), (1.0, online.data().to_vec())] {
        let mut dst = set(&target);
        dst.soft_update_from(&src, tau).unwrap();
        assert_eq!(dst.get("w").unwrap().data(), &want[..], "tau {tau}");
    }
    let mut dst = set(&target);
    dst.soft_update_from(&src, 1e-4).unwrap();
    for ((d, s), t) in dst.get("w").unwrap().data().iter().zip(online.data()).zip(target.data()) {
        assert_eq!(*d, 1e-4 * s + (1.0 - 1e-4) * t);
    }
    let mut scalar = set(&Tensor::from_slice(&[0.0]));
    scalar.soft_update_from(&set(&Tensor::from_slice(&[2.0])), 0.1).unwrap();
    assert!((scalar.get("w").unwrap().data()[0] - 0.2).abs() < 1e-15);
}

#[test]
fn epsilon_schedule_values() {
    assert_eq!(epsilon(0, 0.7, 0.96, 1000), 0.7);
    assert!((epsilon(1000, 0.7, 0.96, 1000) - 0.672).abs() < 1e-12);
    assert!((epsilon(2500, 0.7, 0.96, 1000) - 0.64512).abs() < 1e-12);
    assert_eq!(epsilon(999, 0.7, 0.96, 1000), 0.7);
}

#[test]
fn codec_fuzz_hundred_thousand() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    for _ in 0..100_000 {
        let m = match rng.random_range(0..6) {
            0 => Message::Hello { height: rng.random(), width: rng.random(), thumb_height: rng.random(), thumb_width: rng.random() },
            1 => Message::Thumbnail { rgb: (0..rng.random_range(0..200)).map(|_| rng.random()).collect() },
            2 => Message::FixationRequest { x: f32::from_bits(rng.random()), y: f32::from_bits(rng.random()), l: f32::from_bits(rng.random()) },
            3 => Message::PatchResponse { pixels: (0..rng.random_range(0..40)).map(|_| WirePixel { px: rng.random(), py: rng.random(), rgb: rng.random() }).collect() },
            4 => Message::Prediction { class: rng.random(), entropy: f32::from_bits(rng.random()) },
            _ => Message::Done,
        };
        let bytes = encode(&m);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }
}

#[test]
fn ou_variance_matches_the_stationary_value() {
    let mut ou = OuNoise::new(0.15, 0.2, 0.0);
    let want = ou.stationary_variance();
    assert!((want - 0.04 / 0.2775).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        ou.sample(&mut rng);
    }
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x = ou.sample(&mut rng)[0];
        s += x;
        s2 += x * x;
    }
    let var = s2 / n as f64 - (s / n as f64).powi(2);
    assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
}

#[test]
fn ou_without_noise_decays_geometrically() {
    let mut ou = OuNoise::new(0.15, 0.0, 0.0);
    ou.state = [1.0, -2.0, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 1..20 {
        let s = ou.sample(&mut rng);
        let f = 0.85f64.powi(k);
        for (got, x0) in s.iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - x0 * f).abs() < 1e-12);
        }
    }
    let mut fixed = OuNoise::new(0.15, 0.0, 0.3);
    for _ in 0..10 {
        assert_eq!(fixed.sample(&mut rng), [0.3; 3]);
    }
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut ps = ParameterSet::new();
    ps.insert("w", Tensor::from_slice(&[1.0, -1.0, 0.0])).unwrap();
    let mut st = AdamState::default();
    ps.accumulate_grad("w", &Tensor::from_slice(&[0.5, -3.0, 0.0])).unwrap();
    ps.adam_step(&mut st, 0.1).unwrap();
    // Bias correction makes the first step lr * g / (|g| + eps).
    let w = ps.get("w").unwrap().data().to_vec();
    assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7 && w[2] == 0.0, "{w:?}");
    // Second step against the same gradient, by the closed form.
    ps.accumulate_grad("w", &Tensor::from_slice(&[0.5, -3.0, 0.0])).unwrap();
    ps.adam_step(&mut st, 0.1).unwrap();
    let (b1, b2, g): (f64, f64, f64) = (0.9, 0.999, 0.5);
    let m = (1.0 - b1) * g * (1.0 + b1);
    let v = (1.0 - b2) * g * g * (1.0 + b2);
    let step = 0.1 * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + 1e-8);
    assert!((ps.get("w").unwrap().data()[0] - (w[0] - step)).abs() < 1e-12);
    assert_eq!(st.steps(), 2);
}

#[test]
fn state_dimension_accounts_for_history() {
    let env = EnvConfig::default();
    assert_eq!(env.state_dim(64), 3 * 64 + 3 * env.steps);
}
