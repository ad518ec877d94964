//! Autodiff versus central finite differences for every tensor operation and
//! both composite training losses.

mod common;

use common::gradcases::{self, Case, INSTANCES};
use common::FD_REL_TOL;

fn check(cases: &[Case], name: &str) {
    let (_, case) = cases.iter().find(|(n, _)| *n == name).expect("known case");
    for seed in 0..INSTANCES {
        let err = case(seed);
        assert!(err <= FD_REL_TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

macro_rules! grad_tests {
    ($($test:ident => $cases:ident[$name:literal]),* $(,)?) => {
        $(
            #[test]
            fn $test() {
                check(&gradcases::$cases, $name);
            }
        )*
    };
}

grad_tests! {
    conv1d => OPS["conv1d"],
    maxpool1d => OPS["maxpool1d"],
    batchnorm_train => OPS["batchnorm1d (train)"],
    batchnorm_eval => OPS["batchnorm1d (eval)"],
    leaky_relu => OPS["leaky_relu"],
    gru => OPS["gru"],
    linear => OPS["linear"],
    softmax_cce => OPS["softmax_cce"],
    soft_cross_entropy => OPS["soft_cross_entropy"],
    cosine_similarity => OPS["cosine_similarity"],
    cosine_rows => OPS["cosine_rows"],
    structural_ops => OPS["structural ops"],
    composite_network => OPS["composite network"],
    segment_aggregation_loss => LOSSES["segment aggregation loss, W = 0.2"],
    teacher_student_loss => LOSSES["teacher-student loss"],
}
