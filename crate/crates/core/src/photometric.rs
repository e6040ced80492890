//! Illumination estimation and Retinex-style normalization.
//!
//! A small convolutional net predicts the illumination field `L` from the
//! raw image; dividing it out leaves an approximately illumination-free
//! reflectance map `x_norm = I / (L + ε)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, ParamStore};
use crate::tensor::{Real, Tensor};

const WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricConfig {
    /// Floor of the predicted field.
    pub l_min: f32,
    pub eps: f32,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self { l_min: 0.05, eps: 1e-6 }
    }
}

pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    for (i, (cin, cout)) in [(1, WIDTH), (WIDTH, WIDTH), (WIDTH, 1)].into_iter().enumerate() {
        store.insert(
            format!("photo.conv{}.weight", i + 1),
            params::uniform_fan_in(rng, &[cout, cin, 3, 3], cin * 9),
        );
        store.insert(format!("photo.conv{}.bias", i + 1), Tensor::zeros(&[cout]));
    }
}

fn conv<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, i: usize) -> Result<Var> {
    let w = g.param(store, &format!("photo.conv{i}.weight"))?;
    let b = g.param(store, &format!("photo.conv{i}.bias"))?;
    g.conv2d(x, w, b)
}

/// Field in `[l_min, 1]` for a batch `x[B × H × W × 1]`.
pub fn estimate_illumination<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &PhotometricConfig,
) -> Result<Var> {
    let h = conv(g, store, x, 1)?;
    let h = g.elu(h);
    let h = conv(g, store, h, 2)?;
    let h = g.elu(h);
    let h = conv(g, store, h, 3)?;
    let s = g.sigmoid(h);
    let lo = T::of(cfg.l_min as f64);
    let s = g.scale(s, T::one() - lo);
    Ok(g.shift(s, lo))
}

/// `image / (field + eps)` elementwise.
pub fn normalize<T: Real>(g: &mut Graph<T>, image: Var, field: Var, eps: T) -> Result<Var> {
    if eps <= T::zero() {
        return Err(Error::Parameter("normalization guard must be > 0".into()));
    }
    if g.shape(image) != g.shape(field) {
        return Err(Error::dim("normalize", g.shape(image), g.shape(field)));
    }
    g.div(image, field, eps)
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [h, w] => image.clone().reshape(&[1, h, w, 1]),
        ref s => Err(Error::Shape(format!("expected a 2-D image, got {s:?}"))),
    }
}

/// Estimated illumination of one `[H × W]` image.
pub fn estimate(store: &ParamStore, image: &Tensor, cfg: &PhotometricConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(as_batch(image)?);
    let l = estimate_illumination(&mut g, store, x, cfg)?;
    g.value(l).clone().reshape(image.shape())
}

/// `image / (field + eps)` on plain tensors.
pub fn normalize_image(image: &Tensor, field: &Tensor, eps: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let i = g.constant(image.clone());
    let l = g.constant(field.clone());
    let y = normalize(&mut g, i, l, eps)?;
    Ok(g.value(y).clone())
}

/// Estimate then divide out the illumination of one image.
pub fn photometric_forward(store: &ParamStore, image: &Tensor, cfg: &PhotometricConfig) -> Result<Tensor> {
    let l = estimate(store, image, cfg)?;
    normalize_image(image, &l, cfg.eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        init(&mut s, &mut rng::stream(0, "init"));
        s
    }

    #[test]
    fn field_respects_floor_and_ceiling() {
        let s = store();
        let cfg = PhotometricConfig::default();
        for v in [0.0, 0.5, 1.0] {
            let l = estimate(&s, &Tensor::full(&[8, 8], v), &cfg).unwrap();
            assert!(l.data().iter().all(|&x| (0.05..=1.0).contains(&x)));
            // constant input under mirror padding gives a constant field
            assert!(l.data().iter().all(|&x| x == l.data()[0]));
        }
    }

    #[test]
    fn normalize_examples() {
        let l = Tensor::full(&[4, 4], 0.5);
        let y = normalize_image(&Tensor::full(&[4, 4], 0.25), &l, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-5));
        let y = normalize_image(&l, &l, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
        assert!(matches!(normalize_image(&l, &l, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(
            normalize_image(&l, &Tensor::ones(&[4, 5]), 1e-6),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_image_stays_zero_and_shape_is_checked() {
        let s = store();
        let cfg = PhotometricConfig::default();
        let y = photometric_forward(&s, &Tensor::zeros(&[8, 8]), &cfg).unwrap();
        assert_eq!(y.shape(), &[8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            estimate(&s, &Tensor::zeros(&[8]), &cfg),
            Err(Error::Shape(_))
        ));
    }
}
