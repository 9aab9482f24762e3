//! Fixtures shared by the criterion benchmarks in `benches/`.

use flowinv_core::field::AnalyticGaussianField;
use flowinv_core::nn::{Mlp, MlpConfig, NeuralField};
use flowinv_core::shapes::{gen_shapes_dataset, image_shape, NUM_CLASSES};
use flowinv_core::{Latent, SeededRng, Shape};

/// Analytic field for `shape` with a seeded per-channel data mean.
pub fn analytic(shape: Shape, sigma0: f64) -> AnalyticGaussianField {
    let mut rng = SeededRng::new(11);
    let mu = (0..shape.channels).map(|_| rng.normal()).collect();
    AnalyticGaussianField::new(mu, sigma0).unwrap()
}

/// Untrained network with the reference architecture; evaluation cost does
/// not depend on the weights.
pub fn reference_net() -> NeuralField {
    let arch = MlpConfig::standard(image_shape(), NUM_CLASSES);
    NeuralField::new(Mlp::<f64>::init(arch, 3).unwrap())
}

/// One held-out shapes image.
pub fn shapes_image() -> Latent {
    gen_shapes_dataset(1, 5).unwrap().remove(0).image
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowinv_core::VelocityField;

    #[test]
    fn fixtures_match_the_image_shape() {
        let z = shapes_image();
        assert_eq!(z.shape(), image_shape());
        assert_eq!(
            reference_net()
                .eval(&z, 0.5, flowinv_core::Condition::NULL)
                .shape(),
            z.shape()
        );
        let field = analytic(z.shape(), 0.5);
        assert!(field
            .eval(&z, 0.5, flowinv_core::Condition::NULL)
            .is_finite());
    }
}
