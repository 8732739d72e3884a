//! `compute_metrics` against a brute-force confusion-matrix implementation.

use cmpt_core::metrics::compute_metrics;
use cmpt_core::rng::stream;
use cmpt_core::LabelTarget;
use rand::Rng;

/// Per-class `(tp, fp, fn)` read off full confusion tables.
fn confusion_counts(preds: &[LabelTarget], targets: &[LabelTarget], c: usize) -> Vec<(usize, usize, usize)> {
    match (&preds[0], &targets[0]) {
        (LabelTarget::Single(_), _) => {
            // matrix[true][predicted]
            let mut matrix = vec![vec![0usize; c]; c];
            for (p, t) in preds.iter().zip(targets) {
                let (LabelTarget::Single(p), LabelTarget::Single(t)) = (p, t) else {
                    unreachable!()
                };
                matrix[*t][*p] += 1;
            }
            (0..c)
                .map(|k| {
                    let tp = matrix[k][k];
                    let column: usize = (0..c).map(|r| matrix[r][k]).sum();
                    let row: usize = matrix[k].iter().sum();
                    (tp, column - tp, row - tp)
                })
                .collect()
        }
        (LabelTarget::Multi(_), _) => (0..c)
            .map(|k| {
                // table[truth][prediction] for class k
                let mut table = [[0usize; 2]; 2];
                for (p, t) in preds.iter().zip(targets) {
                    let (LabelTarget::Multi(p), LabelTarget::Multi(t)) = (p, t) else {
                        unreachable!()
                    };
                    table[usize::from(t[k])][usize::from(p[k])] += 1;
                }
                (table[1][1], table[0][1], table[1][0])
            })
            .collect(),
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn random_labels(rng: &mut impl Rng, n: usize, c: usize, multi: bool) -> Vec<LabelTarget> {
    (0..n)
        .map(|_| {
            if multi {
                LabelTarget::Multi((0..c).map(|_| rng.random_bool(0.3)).collect())
            } else {
                LabelTarget::Single(rng.random_range(0..c))
            }
        })
        .collect()
}

#[test]
fn metrics_match_confusion_matrix_oracle() {
    for multi in [false, true] {
        for case in 0..100u64 {
            let mut rng = stream(case, "metrics_oracle", &[u64::from(multi)]);
            let c = rng.random_range(2..=8);
            let n = rng.random_range(1..=60);
            let targets = random_labels(&mut rng, n, c, multi);
            // Mix of copied and random predictions so matches are common.
            let noise = random_labels(&mut rng, n, c, multi);
            let preds: Vec<LabelTarget> = targets
                .iter()
                .zip(noise)
                .map(|(t, r)| if rng.random_bool(0.5) { t.clone() } else { r })
                .collect();

            let m = compute_metrics(&preds, &targets, c).unwrap();
            let counts = confusion_counts(&preds, &targets, c);
            let per_class: Vec<f64> = counts.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).collect();
            let macro_f1 = per_class.iter().sum::<f64>() / c as f64;
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |a, &(tp, fp, fn_)| (a.0 + tp, a.1 + fp, a.2 + fn_));
            let exact = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
            let support: Vec<usize> = counts.iter().map(|&(tp, _, fn_)| tp + fn_).collect();

            let ctx = format!("multi={multi} case={case}");
            assert_eq!(m.accuracy, exact as f64 / n as f64, "{ctx}");
            assert_eq!(m.per_class_f1, per_class, "{ctx}");
            assert_eq!(m.f1_macro, macro_f1, "{ctx}");
            assert_eq!(m.f1_micro, f1(tp, fp, fn_), "{ctx}");
            assert_eq!(m.support, support, "{ctx}");
            if !multi {
                assert_eq!(m.f1_micro, m.accuracy, "{ctx}");
            }
        }
    }
}
