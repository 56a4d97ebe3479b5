use proptest::prelude::*;
use rand::SeedableRng;

use convrnn::autodiff::Tape;
use convrnn::checkpoint::{Checkpoint, CheckpointMeta};
use convrnn::data::{geometric_augment, kfold_split, AugmentConfig};
use convrnn::ensemble::{avg_ensemble, concat_distributions, ext_softmax_ensemble, prune, split_distributions, DistributionVector, EnsembleBatch};
use convrnn::harness::ExperimentConfig;
use convrnn::metrics::accuracy;
use convrnn::optim::{Adam, AdamConfig};
use convrnn::params::bind;
use convrnn::rnn::{lstm_step, reshape_to_sequence, Gate, HiddenState, LstmParams};
use convrnn::tensor::argmax;
use convrnn::{SeededRng, Tensor};

/// Row-stochastic `[rows, classes]` matrices; integer weights make exact ties common.
fn probs() -> impl Strategy<Value = Tensor> {
    (1usize..6, 2usize..8).prop_flat_map(|(rows, classes)| {
        prop::collection::vec(prop::collection::vec(0u8..6, classes), rows).prop_map(move |rs| {
            let data = rs
                .iter()
                .flat_map(|r| {
                    let w: Vec<f64> = r.iter().map(|&v| v as f64 + 0.25).collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(move |v| v / s)
                })
                .collect();
            Tensor::new([rs.len(), classes], data).unwrap()
        })
    })
}

fn same_shape_probs(n: usize) -> impl Strategy<Value = Vec<Tensor>> {
    (1usize..5, 2usize..6).prop_flat_map(move |(rows, classes)| {
        prop::collection::vec(prop::collection::vec(prop::collection::vec(0.01f64..1.0, classes), rows), n).prop_map(|ms| {
            ms.into_iter()
                .map(|rows| {
                    let c = rows[0].len();
                    let data = rows
                        .iter()
                        .flat_map(|r| {
                            let s: f64 = r.iter().sum();
                            r.iter().map(move |v| v / s)
                        })
                        .collect();
                    Tensor::new([rows.len(), c], data).unwrap()
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn prune_keeps_argmax_single_entry_and_is_idempotent(a in probs()) {
        let p = prune(&a).unwrap();
        for r in 0..a.rows() {
            prop_assert_eq!(argmax(p.row(r)), argmax(a.row(r)));
            prop_assert!(p.row(r).iter().filter(|&&v| v != 0.0).count() <= 1);
            prop_assert_eq!(p.row(r)[argmax(a.row(r))], a.row(r)[argmax(a.row(r))]);
        }
        prop_assert_eq!(prune(&p).unwrap(), p);
    }

    #[test]
    fn concat_then_split_is_identity(ms in (1usize..5).prop_flat_map(same_shape_probs)) {
        let ds: Vec<DistributionVector> = ms.iter().map(|m| DistributionVector::new(m.row(0).to_vec()).unwrap()).collect();
        let flat = concat_distributions(&ds).unwrap();
        prop_assert_eq!(flat.len(), ms.len() * ms[0].row_len());
        prop_assert_eq!(split_distributions(&flat, ms[0].row_len()).unwrap(), ds);
    }

    #[test]
    fn ensemble_batch_slices_and_bytes_round_trip(ms in (1usize..5).prop_flat_map(same_shape_probs), label in 0usize..2) {
        let batch = EnsembleBatch::from_predictions(&ms, vec![label; ms[0].rows()]).unwrap();
        for (j, m) in ms.iter().enumerate() {
            prop_assert_eq!(&batch.member(j).unwrap(), m);
        }
        let back = EnsembleBatch::from_bytes(&batch.to_bytes()).unwrap();
        prop_assert_eq!(back.labels, batch.labels);
        for (x, y) in back.inputs.data().iter().zip(batch.inputs.data()) {
            prop_assert_eq!(*x, *y as f32 as f64);
        }
    }

    #[test]
    fn avg_is_row_stochastic(ms in (1usize..5).prop_flat_map(same_shape_probs)) {
        let avg = avg_ensemble(&ms).unwrap();
        for r in 0..avg.rows() {
            prop_assert!(avg.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((avg.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_member_ext_agrees_with_avg(a in probs()) {
        let one = std::slice::from_ref(&a);
        prop_assert_eq!(ext_softmax_ensemble(one).unwrap().argmax_rows(), avg_ensemble(one).unwrap().argmax_rows());
    }

    #[test]
    fn kfold_partitions(n in 2usize..500, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let f = kfold_split(n, k, seed).unwrap();
        let mut all: Vec<usize> = (0..k).flat_map(|i| f.held_out(i)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes = f.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(kfold_split(n, k, seed).unwrap(), f);
    }

    #[test]
    fn adam_second_moment_stays_non_negative(grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..40)) {
        let mut adam = Adam::new(AdamConfig::new(1e-3), &[vec![3]]).unwrap();
        let mut w = Tensor::zeros([3]);
        for g in grads {
            adam.step(&mut [&mut w], &[Tensor::new([3], g).unwrap()]).unwrap();
            prop_assert!(adam.v[0].data().iter().all(|&v| v >= 0.0));
            prop_assert!(w.all_finite());
        }
    }

    #[test]
    fn decayed_rate_strictly_decreases(lr in 1e-6f64..1.0, decay in 1e-6f64..1.0, steps in 1u64..1000) {
        let mut cfg = AdamConfig::new(lr);
        cfg.decay = decay;
        let mut adam = Adam::new(cfg, &[]).unwrap();
        adam.iterations = steps;
        let before = adam.decayed_lr();
        adam.iterations += 1;
        prop_assert!(adam.decayed_lr() < before);
    }

    #[test]
    fn accuracy_is_one_minus_error_rate(a in probs(), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..a.rows()).map(|i| ((seed >> (i % 60)) as usize) % a.row_len()).collect();
        let acc = accuracy(&a, &labels).unwrap();
        let mut wrong = 0;
        for (i, &l) in labels.iter().enumerate() {
            let row = a.row(i);
            // First index holding the row maximum.
            let best = row.iter().cloned().fold(f64::MIN, f64::max);
            let pick = row.iter().position(|&v| v == best).unwrap();
            wrong += usize::from(pick != l);
        }
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((acc - (1.0 - wrong as f64 / labels.len() as f64)).abs() < 1e-12);
    }

    #[test]
    fn augmented_images_stay_in_range(h in 3usize..10, w in 3usize..10, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let img = Tensor::uniform([h, w, c], 1.0, &mut rng).map(|v| v.abs());
        let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
        let out = geometric_augment(&img, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trip_is_exact_at_stored_precision(
        a in prop::collection::vec(-1e3f64..1e3, 1..20),
        b in prop::collection::vec(-1.0f64..1.0, 1..20),
    ) {
        let params = (Tensor::new([a.len()], a).unwrap(), Tensor::new([1, b.len()], b).unwrap());
        let meta = CheckpointMeta { val_accuracy: 0.5, val_loss: 1.0, stage: 2 };
        let ckpt = Checkpoint::capture(&params, None, meta);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let mut restored = (Tensor::zeros(params.0.shape().to_vec()), Tensor::zeros(params.1.shape().to_vec()));
        back.restore_params(&mut restored).unwrap();
        prop_assert_eq!(restored.0, params.0.to_f32_precision());
        prop_assert_eq!(restored.1, params.1.to_f32_precision());
    }

    #[test]
    fn reshape_to_sequence_preserves_order(b in 1usize..5, d in 1usize..9, seed in any::<u64>()) {
        let x = Tensor::uniform([b, d], 1.0, &mut SeededRng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = reshape_to_sequence(&mut tape, v).unwrap();
        prop_assert_eq!(tape.shape(s), &[b, 1, d]);
        prop_assert_eq!(tape.value(s).data(), x.data());
    }

    #[test]
    fn saturated_forget_gate_keeps_the_cell(b in 1usize..4, d in 1usize..4, u in 1usize..4, seed in any::<u64>()) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut p = LstmParams {
            forget: Gate::init(d, u, &mut rng),
            input: Gate::init(d, u, &mut rng),
            candidate: Gate::init(d, u, &mut rng),
            output: Gate::init(d, u, &mut rng),
        };
        p.forget.bias = Tensor::full([u], 50.0);
        p.input.bias = Tensor::full([u], -50.0);
        let x = Tensor::uniform([b, d], 0.5, &mut rng);
        let h = Tensor::uniform([b, u], 0.5, &mut rng);
        let c = Tensor::uniform([b, u], 2.0, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&p, &mut tape);
        let (xv, hv, cv) = (tape.constant(x), tape.constant(h), tape.constant(c.clone()));
        let out = lstm_step(&mut tape, &bound, xv, HiddenState { h: hv, cell: Some(cv) }).unwrap();
        prop_assert!(tape.value(out.cell.unwrap()).max_abs_diff(&c) < 1e-9);
    }

    #[test]
    fn config_survives_its_snapshot(seed in any::<u64>(), units in 1usize..64, dropout in 0.0f64..0.9) {
        let cfg = ExperimentConfig::from_sources(
            None,
            &[format!("seed={seed}"), format!("rnn_units={}", 2 * units), format!("meta_dropout={dropout}")],
        )
        .unwrap();
        prop_assert_eq!(ExperimentConfig::from_sources(Some(&cfg.to_kv()), &[]).unwrap(), cfg);
    }
}
