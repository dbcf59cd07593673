use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DenseNet;

/// Which final-layer parameters receive Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbTarget {
    #[default]
    WeightsAndBias,
    WeightsOnly,
}

/// Copy of `net` whose final layer is resampled elementwise from
/// `Normal(original, sigma²)`. Earlier layers are copied bit for bit.
///
/// A non-positive `sigma` returns an unperturbed copy.
pub fn perturb_last_layer(net: &DenseNet, sigma: f64, seed: u64, target: PerturbTarget) -> DenseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_last_layer_with(net, sigma, target, &mut rng)
}

/// As [`perturb_last_layer`], drawing from a caller-owned generator.
pub fn perturb_last_layer_with<R: Rng + ?Sized>(
    net: &DenseNet,
    sigma: f64,
    target: PerturbTarget,
    rng: &mut R,
) -> DenseNet {
    let mut out = net.clone();
    if !(sigma > 0.0) {
        log::debug!("perturbation with sigma {sigma} treated as identity");
        return out;
    }
    let last = out.last_layer_mut();
    let mut jitter = |w: &mut f32| {
        let z: f64 = StandardNormal.sample(rng);
        *w = (f64::from(*w) + sigma * z) as f32;
    };
    last.weight.iter_mut().for_each(&mut jitter);
    if target == PerturbTarget::WeightsAndBias {
        last.bias.iter_mut().for_each(&mut jitter);
    }
    out
}
