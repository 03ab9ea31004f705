//! The full pipeline: preprocessing U-Net followed by Frangi-Net, with
//! parameters under `unet.` and `frangi.` prefixes in one store.

use crate::error::Result;
use crate::frangi::{self, FrangiNetParams};
use crate::params::{Bound, ParamStore};
use crate::raster::{mirror_index, Image2D};
use crate::tensor::{Array, Graph, Precision, Tensor};
use crate::unet::{self, UNetParams};

pub const UNET_PREFIX: &str = "unet.";
pub const FRANGI_PREFIX: &str = "frangi.";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    params: ParamStore,
}

impl Model {
    /// He-uniform U-Net from `seed` and a classically initialized Frangi-Net.
    pub fn new(seed: u64) -> Self {
        Self::from_parts(&UNetParams::he_uniform(seed), &FrangiNetParams::default())
    }

    pub fn from_parts(unet: &UNetParams, frangi: &FrangiNetParams) -> Self {
        let mut params = ParamStore::new();
        params.extend_prefixed(UNET_PREFIX, unet.store());
        params.extend_prefixed(FRANGI_PREFIX, &frangi.to_store());
        Self { params }
    }

    /// Layout every stored model must have.
    pub fn reference_layout() -> ParamStore {
        Self::from_parts(&UNetParams::identity(), &FrangiNetParams::default()).params
    }

    /// Wraps a store after checking it against [`Self::reference_layout`].
    pub fn from_store(params: ParamStore) -> Result<Self> {
        params.check_layout(&Self::reference_layout())?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn unet(&self) -> Result<UNetParams> {
        UNetParams::from_store(self.params.strip_prefix(UNET_PREFIX))
    }

    pub fn frangi(&self) -> Result<FrangiNetParams> {
        FrangiNetParams::from_store(&self.params.strip_prefix(FRANGI_PREFIX))
    }
}

/// Graph outputs of one pipeline pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// U-Net output `[N, 1, H, W]`.
    pub enhanced: Tensor,
    /// Class probabilities `[N, 2, H, W]`.
    pub prob: Tensor,
}

/// Runs U-Net then Frangi-Net on `image` (`[N, 1, H, W]`, sides multiples of 4).
pub fn forward(g: &mut Graph, image: Tensor, bound: &Bound) -> Result<Forward> {
    let enhanced = unet::unet_forward(g, image, &bound.scoped(UNET_PREFIX))?;
    let prob = frangi::frangi_forward(g, enhanced, &bound.scoped(FRANGI_PREFIX))?;
    Ok(Forward { enhanced, prob })
}

/// Enhanced image and vessel probability for an image of any size.
pub struct Inference {
    pub enhanced: Image2D,
    pub vessel_prob: Image2D,
}

/// Mirror-pads to multiples of 4, runs the pipeline and crops back.
pub fn infer(model: &Model, image: &Image2D, precision: Precision) -> Result<Inference> {
    let (ph, pw) = unet::padding_for(image.height, image.width);
    let (h, w) = (image.height + ph, image.width + pw);
    let padded = Array::from_fn(&[1, 1, h, w], |i| {
        image.at(mirror_index(i % w, image.width), mirror_index(i / w, image.height))
    });
    let mut g = Graph::inference(precision);
    let bound = model.params.bind(&mut g)?;
    let x = g.input(padded)?;
    let out = forward(&mut g, x, &bound)?;
    let crop = |data: &[f64]| -> Result<Image2D> {
        let mut v = Vec::with_capacity(image.width * image.height);
        for y in 0..image.height {
            v.extend_from_slice(&data[y * w..y * w + image.width]);
        }
        let mut img = Image2D::new(image.width, image.height, v)?;
        img.modality = image.modality;
        img.fov = image.fov.clone();
        Ok(img)
    };
    let enhanced = crop(g.value(out.enhanced)?.data())?;
    let vessel_prob = crop(&g.value(out.prob)?.data()[h * w..])?;
    Ok(Inference { enhanced, vessel_prob })
}
