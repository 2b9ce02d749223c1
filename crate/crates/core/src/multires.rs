//! Per-batch input resolution policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{crop_sample, resize_sample};
use crate::error::{Error, Result};
use crate::phantom::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallMode {
    Resize,
    Crop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionBranch {
    /// Whole sample resized to the medium side.
    Fixed768,
    /// Resized to the large side, then a random medium window.
    Large1024Crop768,
    /// Small side, by resizing the sample or cropping its medium-side resize.
    Small512(SmallMode),
}

/// Side lengths of the three branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSizes {
    pub medium: usize,
    pub large: usize,
    pub small: usize,
}

impl BranchSizes {
    pub const FULL: BranchSizes = BranchSizes { medium: 768, large: 1024, small: 512 };

    /// Full sizes divided by `divisor` (2 gives 384 / 512 / 256).
    pub fn scaled(divisor: usize) -> Result<Self> {
        if divisor == 0 || 512 % divisor != 0 || 768 % divisor != 0 {
            return Err(Error::Config(format!("resolution divisor {divisor} must divide 512 and 768")));
        }
        Ok(BranchSizes { medium: 768 / divisor, large: 1024 / divisor, small: 512 / divisor })
    }

    /// Output side length of a branch.
    pub fn side(&self, branch: ResolutionBranch) -> usize {
        match branch {
            ResolutionBranch::Fixed768 | ResolutionBranch::Large1024Crop768 => self.medium,
            ResolutionBranch::Small512(_) => self.small,
        }
    }
}

pub fn sample_branch(rng: &mut impl Rng) -> ResolutionBranch {
    match rng.random_range(0..3u8) {
        0 => ResolutionBranch::Fixed768,
        1 => ResolutionBranch::Large1024Crop768,
        _ => ResolutionBranch::Small512(if rng.random::<bool>() { SmallMode::Resize } else { SmallMode::Crop }),
    }
}

fn random_crop(sample: &Sample, side: usize, rng: &mut impl Rng) -> Result<Sample> {
    let top = rng.random_range(0..=sample.height - side);
    let left = rng.random_range(0..=sample.width - side);
    crop_sample(sample, top, left, side, side)
}

pub fn apply_branch(sample: &Sample, branch: ResolutionBranch, sizes: &BranchSizes, rng: &mut impl Rng) -> Result<Sample> {
    match branch {
        ResolutionBranch::Fixed768 => resize_sample(sample, sizes.medium, sizes.medium),
        ResolutionBranch::Large1024Crop768 => {
            let big = resize_sample(sample, sizes.large, sizes.large)?;
            random_crop(&big, sizes.medium, rng)
        }
        ResolutionBranch::Small512(SmallMode::Resize) => resize_sample(sample, sizes.small, sizes.small),
        ResolutionBranch::Small512(SmallMode::Crop) => {
            let mid = resize_sample(sample, sizes.medium, sizes.medium)?;
            random_crop(&mid, sizes.small, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, Fovea, PhantomConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn branch_sequence_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_branch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn outputs_have_nominal_size_and_valid_masks() {
        let s = generate_phantom(&PhantomConfig::default(), 1).unwrap();
        let sizes = BranchSizes::scaled(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for branch in [
            ResolutionBranch::Fixed768,
            ResolutionBranch::Large1024Crop768,
            ResolutionBranch::Small512(SmallMode::Resize),
            ResolutionBranch::Small512(SmallMode::Crop),
        ] {
            let out = apply_branch(&s, branch, &sizes, &mut rng).unwrap();
            assert_eq!((out.height, out.width), (sizes.side(branch), sizes.side(branch)));
            out.validate().unwrap();
            if let Some(f) = out.fovea() {
                let hm = out.heatmap();
                let argmax = hm.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                assert_eq!(argmax, f.row * out.width + f.col);
            }
        }
    }

    #[test]
    fn crop_shifts_fovea_and_drops_it_outside() {
        let mut s = generate_phantom(&PhantomConfig::default(), 2).unwrap();
        s.set_fovea(Some(Fovea { col: 120, row: 80 }));
        let inside = crop_sample(&s, 50, 100, 64, 64).unwrap();
        assert_eq!(inside.fovea(), Some(Fovea { col: 20, row: 30 }));
        let outside = crop_sample(&s, 150, 150, 64, 64).unwrap();
        assert!(outside.fovea().is_none());
        assert!(outside.heatmap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_divisor_is_rejected() {
        assert!(BranchSizes::scaled(0).is_err());
        assert!(BranchSizes::scaled(5).is_err());
    }
}
