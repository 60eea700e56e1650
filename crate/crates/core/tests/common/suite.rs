//! Finite-difference checks shared by the gradient tests and the acceptance run.

use rand::Rng;
use rdfcil::autograd::Graph;
use rdfcil::losses::{gce_loss, hkd_loss, lce_loss, rkd_angle_loss, ClassCounters, RelationTransforms, TripletSelection};
use rdfcil::model::BnStatRecord;
use rdfcil::synthesizer::{content_loss, diversity_loss, image_prior_loss, stat_alignment_loss};
use rdfcil::tensor::Tensor;

use super::{input_grad_error, param_grad_error, rng};

/// Relative finite-difference error of every loss for one random instance.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let batch = r.random_range(3..=6usize);
    let dim = r.random_range(2..=8usize);
    let n_old = r.random_range(2..=5usize);
    let k_new = r.random_range(2..=4usize);
    let mut out = Vec::new();

    let teacher = Tensor::<f64>::randn(&[batch, n_old], 1.5, &mut r);
    let student = Tensor::<f64>::randn(&[batch, n_old], 1.5, &mut r);
    out.push((
        "hkd",
        input_grad_error(&student, &|g, s| {
            let t = g.constant(teacher.clone());
            hkd_loss(g, t, s, n_old).unwrap()
        }),
    ));

    let logits = Tensor::<f64>::randn(&[batch, k_new], 1.0, &mut r);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..k_new)).collect();
    out.push((
        "lce",
        input_grad_error(&logits, &|g, x| lce_loss(g, x, &labels).unwrap()),
    ));

    // relational term: student features and both transforms
    let old_feats = Tensor::<f64>::randn(&[batch, dim], 1.0, &mut r);
    let new_feats = Tensor::<f64>::randn(&[batch, dim], 1.0, &mut r);
    let transforms = RelationTransforms::<f64>::new(dim, &mut r);
    let sel = TripletSelection::All;
    out.push((
        "rkd_features",
        input_grad_error(&new_feats, &|g, s| {
            let t = g.constant(old_feats.clone());
            transforms.loss(g, t, s, &sel).unwrap()
        }),
    ));
    out.push((
        "rkd_transforms",
        param_grad_error(&transforms, &|g, tr| {
            let t = g.constant(old_feats.clone());
            let s = g.constant(new_feats.clone());
            tr.loss(g, t, s, &sel).unwrap()
        }),
    ));
    out.push((
        "rkd_plain",
        input_grad_error(&new_feats, &|g, s| {
            let t = g.constant(old_feats.clone());
            rkd_angle_loss(g, t, s, &sel).unwrap()
        }),
    ));

    let classes = n_old + k_new;
    let all_logits = Tensor::<f64>::randn(&[batch, classes], 1.0, &mut r);
    let all_labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes - 1)).collect();
    // the last class was never seen
    let mut counts: Vec<u64> = (0..classes).map(|_| r.random_range(1..20u64)).collect();
    counts[classes - 1] = 0;
    let counters = ClassCounters::from_counts(counts);
    out.push((
        "gce",
        input_grad_error(&all_logits, &|g, x| gce_loss(g, x, &all_labels, &counters).unwrap()),
    ));

    let teacher_logits = Tensor::<f64>::randn(&[batch, n_old], 2.0, &mut r);
    out.push((
        "diversity",
        input_grad_error(&teacher_logits, &|g, x| diversity_loss(g, x).unwrap()),
    ));
    let argmax: Vec<usize> = (0..batch)
        .map(|i| {
            let row = teacher_logits.row(i);
            (0..n_old).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        })
        .collect();
    out.push((
        "content",
        input_grad_error(&teacher_logits, &|g, x| content_loss(g, x, &argmax, 1000.0).unwrap()),
    ));

    let channels = r.random_range(2..=4usize);
    let acts = Tensor::<f64>::randn(&[batch, channels, 2, 2], 1.0, &mut r);
    let record = |layer: u64, r: &mut rand_chacha::ChaCha8Rng| BnStatRecord {
        layer,
        mean: (0..channels).map(|_| r.random_range(-0.5..0.5)).collect(),
        var: (0..channels).map(|_| r.random_range(0.3..2.0)).collect(),
    };
    let records = vec![record(1, &mut r), record(2, &mut r)];
    out.push((
        "stat",
        input_grad_error(&acts, &|g, x| {
            let second = g.tanh(x);
            stat_alignment_loss(g, &[(1, x), (2, second)], &records).unwrap()
        }),
    ));

    let images = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
    out.push((
        "prior",
        input_grad_error(&images, &|g, x| image_prior_loss(g, x).unwrap()),
    ));
    out
}

/// Fresh graph helper for value-only evaluations.
pub fn value_of(build: impl FnOnce(&mut Graph<f64>) -> rdfcil::autograd::Var) -> f64 {
    let mut g = Graph::new();
    let v = build(&mut g);
    g.value(v).item()
}
