mod common;

use agenet::seed::rng_for;
use agenet::{Pipeline, TransformSpec};
use proptest::prelude::*;

const ALL: [Pipeline; 4] = [
    Pipeline::Norm256,
    Pipeline::Norm256Flip,
    Pipeline::ResizeColorjitFlipBlur,
    Pipeline::EvalDeterministic,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_pipeline_yields_a_square_tensor(w in 8u32..90, h in 8u32..90, seed in any::<u64>()) {
        let img = image::imageops::resize(&common::synthetic_image(seed, 64), w, h, image::imageops::FilterType::Triangle);
        for p in ALL {
            let t = TransformSpec::new(p, 32).apply(&img, &mut rng_for(seed, &[])).unwrap();
            prop_assert_eq!(t.shape(), &[3, 32, 32]);
            prop_assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn evaluation_ignores_the_rng(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let img = common::synthetic_image(seed, 48);
        let t = TransformSpec::eval(32);
        let x = t.apply(&img, &mut rng_for(a, &[])).unwrap();
        let y = t.apply(&img, &mut rng_for(b, &[])).unwrap();
        prop_assert_eq!(x.data(), y.data());
    }
}

#[test]
fn stochastic_pipelines_repeat_under_a_seed() {
    let img = common::synthetic_image(3, 64);
    for p in [Pipeline::Norm256Flip, Pipeline::ResizeColorjitFlipBlur] {
        assert!(p.is_stochastic());
        let t = TransformSpec::new(p, 32);
        let a = t.apply(&img, &mut rng_for(9, &[])).unwrap();
        let b = t.apply(&img, &mut rng_for(9, &[])).unwrap();
        assert_eq!(a.data(), b.data());
        let differs = (0..20u64).any(|s| t.apply(&img, &mut rng_for(s, &[])).unwrap().data() != a.data());
        assert!(differs, "{} never varied", p.name());
    }
    assert!(!Pipeline::Norm256.is_stochastic());
    assert!(!Pipeline::EvalDeterministic.is_stochastic());
}
