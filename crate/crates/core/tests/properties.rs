use proptest::prelude::*;
use underq_core::agent::{preset, preset_names, ExperimentConfig};
use underq_core::approx::checkpoint::Checkpoint;
use underq_core::approx::mlp::{Activation, MlpSpec, ParamSet};
use underq_core::dataset::{DatasetMeta, OfflineDataset, TransitionRecord};
use underq_core::gumbel::soft_max_operator;

fn any_real() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, prop::num::f64::NORMAL, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE),]
}

fn record(sd: usize, ad: usize) -> impl Strategy<Value = TransitionRecord> {
    (
        prop::collection::vec(any_real(), sd),
        prop::collection::vec(any_real(), ad),
        any_real(),
        prop::collection::vec(any_real(), sd),
        any::<bool>(),
    )
        .prop_map(|(state, action, reward, next_state, done)| TransitionRecord {
            state,
            action,
            reward,
            next_state,
            done,
        })
}

fn dataset() -> impl Strategy<Value = OfflineDataset> {
    (1usize..4, 1usize..3, any::<u64>())
        .prop_flat_map(|(sd, ad, seed)| (Just((sd, ad, seed)), prop::collection::vec(record(sd, ad), 1..20)))
        .prop_map(|((sd, ad, seed), records)| {
            let meta = DatasetMeta { description: String::new(), seed, episode_lengths: Vec::new() };
            OfflineDataset::new(sd, ad, false, records, meta).unwrap()
        })
}

proptest! {
    #[test]
    fn dataset_text_round_trip_is_bit_exact(d in dataset()) {
        let back = OfflineDataset::parse(&d.to_text()).unwrap();
        prop_assert_eq!(back.state_dim(), d.state_dim());
        prop_assert_eq!(back.action_dim(), d.action_dim());
        prop_assert_eq!(back.meta.seed, d.meta.seed);
        prop_assert_eq!(back.len(), d.len());
        for (a, b) in back.records().iter().zip(d.records()) {
            let bits = |r: &TransitionRecord| -> Vec<u64> {
                r.state.iter().chain(&r.action).chain([&r.reward]).chain(&r.next_state).map(|x| x.to_bits()).collect()
            };
            prop_assert_eq!(bits(a), bits(b));
            prop_assert_eq!(a.done, b.done);
        }
    }

    #[test]
    fn checkpoint_text_round_trip_is_bit_exact(
        seed in any::<u64>(),
        step in any::<u64>(),
        input in 1usize..4,
        hidden in prop::collection::vec(1usize..6, 0..3),
        noise in prop::collection::vec(any_real(), 1..200),
    ) {
        let spec = MlpSpec::new(input, 2, hidden, Activation::Mish).unwrap();
        let values: Vec<f64> = (0..spec.n_params()).map(|i| noise[i % noise.len()]).collect();
        let params = ParamSet::from_vec(&spec, values).unwrap();
        let mut ck = Checkpoint::new(seed, step);
        ck.meta.insert("score".into(), "12.5".into());
        ck.push("net", &spec, &params);
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.step, step);
        let net = back.network("net").unwrap();
        prop_assert_eq!(&net.spec, &spec);
        let bits: Vec<u64> = net.params.values().iter().map(|x| x.to_bits()).collect();
        let want: Vec<u64> = params.values().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(bits, want);
        prop_assert_eq!(back.meta.get("score").map(String::as_str), Some("12.5"));
    }

    #[test]
    fn config_snapshot_reloads_to_the_same_config(
        idx in 0usize..64,
        lr in 1e-6f64..1e-1,
        tau in 0.01f64..0.99,
        hidden in prop::collection::vec(1usize..512, 1..4),
        max_q in any::<bool>(),
    ) {
        let names = preset_names();
        let mut cfg = preset(names[idx % names.len()]).unwrap();
        cfg.agent.lr = lr;
        cfg.agent.tau_q1 = tau;
        cfg.agent.hidden = hidden;
        cfg.agent.max_q_backup = max_q;
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        back.preset = cfg.preset.clone();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn soft_max_between_mean_and_max(
        q in prop::collection::vec(-20.0f64..20.0, 1..8),
        beta in 0.01f64..10.0,
    ) {
        let w = vec![1.0 / q.len() as f64; q.len()];
        let v = soft_max_operator(&q, &w, beta).unwrap();
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= mean - 1e-9 && v <= max + 1e-9);
    }
}

#[test]
fn malformed_text_is_rejected() {
    assert!(OfflineDataset::parse("").is_err());
    assert!(OfflineDataset::parse("underq-dataset v1, 1, 1, 0, 2, 0\n0, 0, 0, 0, 0\n").is_err());
    assert!(OfflineDataset::parse("underq-dataset v1, 1, 1, 0, 1, 0\n0, 0, 0, 0, 2\n").is_err());
    assert!(Checkpoint::parse("not a checkpoint").is_err());
    let mut cfg = ExperimentConfig::default();
    assert!(cfg.apply_text("lr 0.1").is_err());
    assert!(cfg.apply_text("bogus=1").is_err());
    assert!(cfg.apply_text("tau_convention=sideways").is_err());
}
