//! Contracts of the assembled model: gradients, gating, alignment masking,
//! zero-init identity and the freeze contract.

use cmpt_core::data::Sample;
use cmpt_core::encoder::{extract, InputShape, Slot};
use cmpt_core::fusion::{fuse, gate, predict, GateCase};
use cmpt_core::metrics::decide;
use cmpt_core::model::{gradcheck_model, randomize_adapters, CmptModel, ModelSpec};
use cmpt_core::objectives::{alignment_loss, AlignInput};
use cmpt_core::rng::{gaussian, stream};
use cmpt_core::train::train_cmpt;
use cmpt_core::{
    EncoderConfig, Error, LabelMode, LabelTarget, LoraConfig, Modality, ParamStore, PresenceMask, Tape, Tensor2D,
    TrainConfig, TrainingMode,
};
use proptest::prelude::*;

fn spec(mode: TrainingMode, rank: usize, label_mode: LabelMode) -> ModelSpec {
    ModelSpec {
        mode,
        encoder: EncoderConfig {
            d_model: 6,
            heads: 2,
            layers: 2,
            ff_dim: 10,
            lora: LoraConfig {
                rank,
                alpha: 2.0,
                dropout: 0.1,
            },
            ..EncoderConfig::default()
        },
        inputs: [
            InputShape {
                raw_dim: 8,
                patch_size: 4,
            },
            InputShape {
                raw_dim: 6,
                patch_size: 2,
            },
        ],
        n_classes: 4,
        label_mode,
    }
}

fn sample(seed: u64, mask: PresenceMask, target: LabelTarget) -> Sample {
    let mut rng = stream(seed, "test_sample", &[]);
    let mut raw_m1 = gaussian(&mut rng, 1, 8, 1.0).into_vec();
    let mut raw_m2 = gaussian(&mut rng, 1, 6, 1.0).into_vec();
    if !mask.m1_present {
        raw_m1.iter_mut().for_each(|v| *v = 0.0);
    }
    if !mask.m2_present {
        raw_m2.iter_mut().for_each(|v| *v = 0.0);
    }
    Sample {
        raw_m1,
        raw_m2,
        mask,
        target,
    }
}

fn bits(t: &Tensor2D) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn full_model_gradcheck_with_every_tensor_trainable() {
    for (mode, label_mode) in [
        (TrainingMode::Cmpt, LabelMode::Single),
        (TrainingMode::Cmpt, LabelMode::Multi),
        (TrainingMode::DropoutOnly, LabelMode::Single),
    ] {
        let mut model = CmptModel::build(&spec(mode, 1, label_mode), 7).unwrap();
        randomize_adapters(&mut model, 7, 0.3);
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            model.store.set_trainable(id, true);
        }
        let target = |k: usize| match label_mode {
            LabelMode::Single => LabelTarget::Single(k),
            LabelMode::Multi => LabelTarget::Multi((0..4).map(|j| j == k || j == 0).collect()),
        };
        let a = sample(1, PresenceMask::BOTH, target(1));
        let b = sample(2, PresenceMask::BOTH, target(3));
        let batch = [(&a, PresenceMask::M2_ONLY), (&b, PresenceMask::BOTH)];
        let report = gradcheck_model(&mut model, &batch, 0.2, 1e-6, |_, _| true).unwrap();
        assert_eq!(report.coordinates, model.store.iter().map(|(_, p)| p.value.data().len()).sum::<usize>());
        assert!(report.max_rel_error < 1e-4, "{mode} {label_mode:?}: {report:?}");
    }
}

#[test]
fn gate_truth_table_is_exhaustive() {
    let tokens = [Some(1u8), Some(2), Some(3), Some(4)];
    let expected = [
        ((true, true), Some((1, 2, GateCase::Both))),
        ((false, true), Some((2, 4, GateCase::M1Missing))),
        ((true, false), Some((1, 3, GateCase::M2Missing))),
        ((false, false), None),
    ];
    for ((m1, m2), want) in expected {
        let got = gate(PresenceMask::new(m1, m2), tokens[0], tokens[1], tokens[2], tokens[3]);
        match want {
            Some((a, b, case)) => {
                let g = got.unwrap();
                assert_eq!((g.token_a, g.token_b, g.case), (a, b, case));
            }
            None => assert!(matches!(got, Err(Error::NoModality))),
        }
    }
    // Tokens of an absent modality are never needed.
    assert!(gate(PresenceMask::M1_ONLY, Some(1), None, Some(3), None).is_ok());
    assert!(gate(PresenceMask::M2_ONLY, None, Some(2), None, Some(4)).is_ok());
    assert!(gate(PresenceMask::BOTH, Some(1), Some(2), None, None).is_ok());
}

#[test]
fn proxy_rows_do_not_reach_both_present_logits() {
    let model = CmptModel::build(&spec(TrainingMode::Cmpt, 1, LabelMode::Single), 3).unwrap();
    let s = sample(5, PresenceMask::BOTH, LabelTarget::Single(0));
    let reference = model.predict_logits(&s).unwrap();

    let mut tape = Tape::new();
    let mut cls = Vec::new();
    for m in Modality::BOTH {
        let out = model.arch.encoders[m.index()]
            .forward(&mut tape, &model.store, s.raw_or_placeholder(m), true, None)
            .unwrap();
        cls.push(extract(&mut tape, &out, Slot::Cls).unwrap());
    }
    let mut rng = stream(9, "perturb", &[]);
    let p1 = tape.constant(gaussian(&mut rng, 1, 6, 100.0)).unwrap();
    let p2 = tape.constant(gaussian(&mut rng, 1, 6, 100.0)).unwrap();
    let g = gate(PresenceMask::BOTH, Some(cls[0]), Some(cls[1]), Some(p1), Some(p2)).unwrap();
    let fused = fuse(&mut tape, &g).unwrap();
    let logits = predict(&mut tape, &model.store, fused, &model.arch.head).unwrap();
    assert_eq!(bits(tape.value(logits)), bits(&reference));
}

#[test]
fn isolated_class_tokens_ignore_proxy_parameters() {
    let mut sp = spec(TrainingMode::Cmpt, 1, LabelMode::Single);
    sp.encoder.isolate_cls_from_cmpt = true;
    let mut model = CmptModel::build(&sp, 3).unwrap();
    randomize_adapters(&mut model, 3, 0.2);
    let s = sample(5, PresenceMask::BOTH, LabelTarget::Single(0));
    let before = model.predict_logits(&s).unwrap();
    for enc in &model.arch.encoders {
        let id = enc.specials.cmpt.unwrap();
        model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 5.0);
    }
    assert_eq!(bits(&model.predict_logits(&s).unwrap()), bits(&before));
    let missing = sample(5, PresenceMask::M1_ONLY, LabelTarget::Single(0));
    let mut fresh = CmptModel::build(&sp, 3).unwrap();
    randomize_adapters(&mut fresh, 3, 0.2);
    assert_ne!(
        bits(&model.predict_logits(&missing).unwrap()),
        bits(&fresh.predict_logits(&missing).unwrap())
    );
}

#[test]
fn incomplete_samples_leave_alignment_unchanged() {
    let model = CmptModel::build(&spec(TrainingMode::Cmpt, 1, LabelMode::Single), 4).unwrap();
    let c1 = sample(10, PresenceMask::BOTH, LabelTarget::Single(1));
    let c2 = sample(11, PresenceMask::BOTH, LabelTarget::Single(2));
    let i1 = sample(12, PresenceMask::M1_ONLY, LabelTarget::Single(0));
    let i2 = sample(13, PresenceMask::M2_ONLY, LabelTarget::Single(3));
    let loss = |batch: &[(&Sample, PresenceMask)]| {
        let mut tape = Tape::new();
        model.arch.batch_loss(&mut tape, &model.store, batch, 0.2, false, None).unwrap().1
    };
    let base = loss(&[(&c1, PresenceMask::BOTH), (&c2, PresenceMask::M1_ONLY)]);
    let more = loss(&[
        (&i1, PresenceMask::BOTH),
        (&c1, PresenceMask::BOTH),
        (&i2, PresenceMask::BOTH),
        (&c2, PresenceMask::M1_ONLY),
    ]);
    assert_eq!(base.n_complete_in_batch, 2);
    assert_eq!(more.n_complete_in_batch, 2);
    assert_eq!(more.align - base.align, 0.0);
    assert_eq!(more.align.to_bits(), base.align.to_bits());
    assert!(base.align > 0.0);
}

#[test]
fn alignment_sends_no_gradient_into_class_tokens() {
    let mut store = ParamStore::new();
    let mut rng = stream(1, "align_grad", &[]);
    let names = ["cmpt1", "cls1", "cmpt2", "cls2"];
    let ids: Vec<_> = names
        .iter()
        .map(|n| store.add(*n, gaussian(&mut rng, 1, 5, 1.0), true))
        .collect();
    let mut tape = Tape::new();
    let v: Vec<_> = ids.iter().map(|&id| tape.param(&store, id).unwrap()).collect();
    let input = AlignInput {
        cmpt1: Some(v[0]),
        cls1: Some(v[1]),
        cmpt2: Some(v[2]),
        cls2: Some(v[3]),
        mask: PresenceMask::BOTH,
    };
    let (loss, n) = alignment_loss(&mut tape, &[input], false).unwrap();
    assert_eq!(n, 1);
    tape.backward(loss, &mut store).unwrap();
    for (i, &id) in ids.iter().enumerate() {
        let g = store.grad(id).unwrap();
        if names[i].starts_with("cls") {
            assert!(g.data().iter().all(|&x| x == 0.0), "{} received gradient", names[i]);
        } else {
            assert!(g.data().iter().any(|&x| x != 0.0), "{} received no gradient", names[i]);
        }
    }
}

#[test]
fn untrained_model_equals_adapter_free_forward() {
    for mode in TrainingMode::ALL {
        let model = CmptModel::build(&spec(mode, 2, LabelMode::Single), 8).unwrap();
        for mask in [PresenceMask::BOTH, PresenceMask::M1_ONLY, PresenceMask::M2_ONLY] {
            let s = sample(20, mask, LabelTarget::Single(0));
            let mut tape = Tape::new();
            let mut cls = [None, None];
            let mut cmpt = [None, None];
            for m in Modality::BOTH {
                if mode.uses_cmpt() && !mask.present(m) {
                    continue;
                }
                let out = model.arch.encoders[m.index()]
                    .forward(&mut tape, &model.store, s.raw_or_placeholder(m), false, None)
                    .unwrap();
                cls[m.index()] = Some(extract(&mut tape, &out, Slot::Cls).unwrap());
                if mode.uses_cmpt() {
                    cmpt[m.index()] = Some(extract(&mut tape, &out, Slot::Cmpt).unwrap());
                }
            }
            let g = if mode.uses_cmpt() {
                gate(mask, cls[0], cls[1], cmpt[0], cmpt[1]).unwrap()
            } else {
                gate(PresenceMask::BOTH, cls[0], cls[1], None, None).unwrap()
            };
            let fused = fuse(&mut tape, &g).unwrap();
            let logits = predict(&mut tape, &model.store, fused, &model.arch.head).unwrap();
            assert_eq!(
                bits(tape.value(logits)),
                bits(&model.predict_logits(&s).unwrap()),
                "{mode} {mask:?}"
            );
        }
    }
}

#[test]
fn trainable_count_matches_enumeration() {
    for mode in TrainingMode::ALL {
        for rank in [1, 2, 4] {
            let sp = spec(mode, rank, LabelMode::Single);
            let model = CmptModel::build(&sp, 1).unwrap();
            let enumerated: usize = model
                .store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| p.value.data().len())
                .sum();
            let (l, d, c) = (2, 6, 4);
            let per_encoder = 8 * l * d * rank + if mode.uses_cmpt() { d } else { 0 };
            assert_eq!(enumerated, 2 * per_encoder + d * c + c, "{mode} rank {rank}");
            assert_eq!(model.trainable_count(), enumerated);
            assert_eq!(sp.expected_trainable_count(), enumerated);
        }
    }
}

#[test]
fn training_leaves_frozen_tensors_untouched() {
    let sp = spec(TrainingMode::Cmpt, 1, LabelMode::Single);
    let mut model = CmptModel::build(&sp, 2).unwrap();
    let frozen = model.store.frozen_checksum();
    let per_tensor: Vec<_> = model
        .frozen_ids()
        .into_iter()
        .map(|id| model.store.value(id).checksum())
        .collect();
    let adapters_before = model.store.checksum();
    let train: Vec<Sample> = (0..12)
        .map(|i| {
            let mask = [PresenceMask::BOTH, PresenceMask::M1_ONLY, PresenceMask::M2_ONLY][i % 3];
            sample(100 + i as u64, mask, LabelTarget::Single(i % 4))
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let logs = train_cmpt(&mut model, &train, &cfg, |_| {}).unwrap();
    assert_eq!(logs.len(), 3);
    assert_eq!(model.store.frozen_checksum(), frozen);
    let after: Vec<_> = model
        .frozen_ids()
        .into_iter()
        .map(|id| model.store.value(id).checksum())
        .collect();
    assert_eq!(after, per_tensor);
    assert_ne!(model.store.checksum(), adapters_before);
}

#[test]
fn training_is_deterministic() {
    let sp = spec(TrainingMode::Cmpt, 1, LabelMode::Single);
    let train: Vec<Sample> = (0..8)
        .map(|i| sample(200 + i as u64, PresenceMask::BOTH, LabelTarget::Single(i % 4)))
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = CmptModel::build(&sp, 6).unwrap();
        let logs = train_cmpt(&mut model, &train, &cfg, |_| {}).unwrap();
        (model.store.checksum(), logs)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decisions_ignore_positive_logit_scale(
        logits in prop::collection::vec(-10.0f64..10.0, 1..12),
        scale in 1e-3f64..1e3,
    ) {
        let z = Tensor2D::row_vector(&logits);
        let scaled = z.scale(scale);
        for mode in [LabelMode::Single, LabelMode::Multi] {
            prop_assert_eq!(decide(&z, mode).unwrap(), decide(&scaled, mode).unwrap());
        }
    }
}
