use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{augment, to_tensor, AugmentConfig, CanonicalImage};
use crate::tensor::Tensor;

/// Decoded canonical images, kept single-plane and expanded to the model's
/// channel count on request.
#[derive(Clone, Debug)]
pub struct ImageStore {
    channels: usize,
    side: Option<usize>,
    cache: HashMap<PathBuf, CanonicalImage>,
}

impl ImageStore {
    pub fn new(channels: usize) -> Self {
        ImageStore {
            channels,
            side: None,
            cache: HashMap::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Side length of the images seen so far; all must agree.
    pub fn side(&self) -> Option<usize> {
        self.side
    }

    pub fn image(&mut self, path: &Path) -> Result<&CanonicalImage> {
        if !self.cache.contains_key(path) {
            let img = CanonicalImage::load(path, 1)?;
            match self.side {
                Some(s) if s != img.side() => {
                    return Err(Error::InvalidImage(format!(
                        "{} is {2}x{2} but earlier images are {1}x{1}",
                        path.display(),
                        s,
                        img.side()
                    )));
                }
                _ => self.side = Some(img.side()),
            }
            self.cache.insert(path.to_path_buf(), img);
        }
        Ok(&self.cache[path])
    }

    fn expand(&self, img: &CanonicalImage) -> Result<Tensor> {
        let full = CanonicalImage::from_gray(img.side(), self.channels, img.plane(0).to_vec())?;
        Ok(to_tensor(&full))
    }

    pub fn tensor(&mut self, path: &Path) -> Result<Tensor> {
        let img = self.image(path)?.clone();
        self.expand(&img)
    }

    pub fn augmented(&mut self, path: &Path, cfg: &AugmentConfig, augment_seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(augment_seed);
        let img = augment(self.image(path)?, cfg, &mut rng);
        self.expand(&img)
    }
}
