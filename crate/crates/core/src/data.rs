//! Synthetic re-identification data: each identity is a fixed layout of
//! coloured horizontal parts plus an accent patch; images add illumination
//! changes, horizontal flips and pixel noise on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticReidSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Number of horizontal colour parts per identity.
    pub parts: usize,
    /// Brightness factor drawn from `1 ± illumination`.
    pub illumination: f64,
    pub flip_prob: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SyntheticReidSpec {
    fn default() -> Self {
        Self {
            train_identities: 16,
            test_identities: 8,
            images_per_identity: 8,
            height: 32,
            width: 16,
            parts: 3,
            illumination: 0.4,
            flip_prob: 0.5,
            noise: 0.2,
        }
    }
}

impl SyntheticReidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_identities == 0 || self.test_identities == 0 {
            return Err(Error::Config("dataset needs at least one train and one test identity".into()));
        }
        if self.images_per_identity < 2 {
            return Err(Error::Config(format!(
                "images_per_identity must be >= 2, got {}",
                self.images_per_identity
            )));
        }
        if self.height < 2 || self.width < 2 || self.parts == 0 || self.parts > self.height {
            return Err(Error::Config(format!(
                "image {}x{} cannot hold {} parts",
                self.height, self.width, self.parts
            )));
        }
        if !(0.0..1.0).contains(&self.illumination) || !(0.0..=1.0).contains(&self.flip_prob) || !(self.noise >= 0.0) {
            return Err(Error::Config("illumination in [0,1), flip_prob in [0,1], noise >= 0".into()));
        }
        Ok(())
    }
}

/// Appearance shared by every image of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityLatent {
    /// First row of each part after the first.
    pub cuts: Vec<usize>,
    pub colors: Vec<[f64; 3]>,
    /// `(row, col, height, width)`.
    pub accent: (usize, usize, usize, usize),
    pub accent_color: [f64; 3],
}

impl IdentityLatent {
    fn sample(spec: &SyntheticReidSpec, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (spec.height, spec.width);
        let mut cuts: Vec<usize> = Vec::new();
        while cuts.len() + 1 < spec.parts {
            let c = rng.gen_range(1..h);
            if !cuts.contains(&c) {
                cuts.push(c);
            }
        }
        cuts.sort_unstable();
        let mut color = || [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let colors = (0..spec.parts).map(|_| color()).collect();
        let accent_color = color();
        let ah = rng.gen_range(1..=h.div_ceil(3));
        let aw = rng.gen_range(1..=w.div_ceil(2));
        let accent = (rng.gen_range(0..=h - ah), rng.gen_range(0..=w - aw), ah, aw);
        Self { cuts, colors, accent, accent_color }
    }

    /// Clean `[h, w, 3]` rendering, values in `[0, 1]`.
    pub fn render(&self, h: usize, w: usize) -> Vec<f64> {
        let mut img = vec![0.0; h * w * 3];
        for r in 0..h {
            let part = self.cuts.iter().filter(|&&c| c <= r).count();
            let (ar, ac, ah, aw) = self.accent;
            for c in 0..w {
                let in_accent = (ar..ar + ah).contains(&r) && (ac..ac + aw).contains(&c);
                let rgb = if in_accent { self.accent_color } else { self.colors[part] };
                img[(r * w + c) * 3..(r * w + c + 1) * 3].copy_from_slice(&rgb);
            }
        }
        img
    }
}

/// Images `[n, h, w, 3]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed images into a new `[k, h, w, 3]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.images.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Labels `0..train_identities`.
    pub train: Split,
    /// One image per held-out identity; labels start at `train_identities`.
    pub probe: Split,
    pub gallery: Split,
    pub latents: Vec<IdentityLatent>,
}

impl Dataset {
    pub fn num_train_classes(&self) -> usize {
        self.train.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Generates train, probe and gallery splits; bit-identical for equal
/// `(spec, seed)`.
pub fn generate_dataset(spec: &SyntheticReidSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.train_identities + spec.test_identities;
    let latents: Vec<_> = (0..total).map(|_| IdentityLatent::sample(spec, &mut rng)).collect();
    let (h, w) = (spec.height, spec.width);
    let per = h * w * 3;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let render = |latent: &IdentityLatent, rng: &mut ChaCha8Rng| {
        let clean = latent.render(h, w);
        let gain = 1.0 + spec.illumination * (2.0 * rng.gen::<f64>() - 1.0);
        let flip = rng.gen::<f64>() < spec.flip_prob;
        let mut img = vec![0.0; per];
        for r in 0..h {
            for c in 0..w {
                let src = if flip { w - 1 - c } else { c };
                for ch in 0..3 {
                    let v = clean[(r * w + src) * 3 + ch] * gain - 0.5;
                    img[(r * w + c) * 3 + ch] = if spec.noise > 0.0 { v + noise.sample(rng) } else { v };
                }
            }
        }
        img
    };

    let n = spec.images_per_identity;
    let mut train = (Vec::new(), Vec::new());
    let mut probe = (Vec::new(), Vec::new());
    let mut gallery = (Vec::new(), Vec::new());
    for (id, latent) in latents.iter().enumerate() {
        let images: Vec<Vec<f64>> = (0..n).map(|_| render(latent, &mut rng)).collect();
        if id < spec.train_identities {
            for img in images {
                train.0.extend(img);
                train.1.push(id);
            }
        } else {
            let chosen = rng.gen_range(0..n);
            for (i, img) in images.into_iter().enumerate() {
                let dst = if i == chosen { &mut probe } else { &mut gallery };
                dst.0.extend(img);
                dst.1.push(id);
            }
        }
    }
    let split = |(data, labels): (Vec<f64>, Vec<usize>)| -> Result<Split> {
        Ok(Split { images: Tensor::new(vec![labels.len(), h, w, 3], data)?, labels })
    };
    Ok(Dataset { train: split(train)?, probe: split(probe)?, gallery: split(gallery)?, latents })
}
