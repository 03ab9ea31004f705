//! Three-level preprocessing U-Net (16/32/64 filters).
//!
//! Each level block is two 3x3 zero-padded convolutions with leaky ReLU
//! (slope 0.1). Downsampling is 2x2 max pooling; upsampling is nearest
//! neighbour followed by a learned 3x3 convolution. Skip connections
//! concatenate the encoder output of levels 1 and 2 after the upsampled
//! decoder features. A 1x1 convolution and `tanh` produce the enhanced image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::raster::{mirror_index, Image2D};
use crate::tensor::{Activation, Array, Graph, Padding, Precision, Tensor};

pub const LEAK: f64 = 0.1;

/// Parameter count of the architecture; pinned in tests.
pub const PARAM_COUNT: usize = 129_553;

/// `(name, in_channels, out_channels, kernel side)` in forward order.
pub const LAYERS: [(&str, usize, usize, usize); 13] = [
    ("enc1.conv1", 1, 16, 3),
    ("enc1.conv2", 16, 16, 3),
    ("enc2.conv1", 16, 32, 3),
    ("enc2.conv2", 32, 32, 3),
    ("bottom.conv1", 32, 64, 3),
    ("bottom.conv2", 64, 64, 3),
    ("up2.conv", 64, 32, 3),
    ("dec2.conv1", 64, 32, 3),
    ("dec2.conv2", 32, 32, 3),
    ("up1.conv", 32, 16, 3),
    ("dec1.conv1", 32, 16, 3),
    ("dec1.conv2", 16, 16, 3),
    ("out", 16, 1, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    store: ParamStore,
}

impl UNetParams {
    /// He-uniform kernels (`U(-b, b)`, `b = sqrt(6 / fan_in)`), zero biases.
    pub fn he_uniform(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, cin, cout, k) in LAYERS {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            let w = Array::from_fn(&[cout, cin, k, k], |_| rng.random_range(-bound..bound));
            store.insert(format!("{name}.weight"), w);
            store.insert(format!("{name}.bias"), Array::zeros(&[cout]));
        }
        Self { store }
    }

    /// Network whose output is `tanh(x)` for any non-negative input `x`:
    /// every 3x3 kernel copies channel 0 through its centre tap, decoder
    /// blocks read the skip channel, and the output layer has weight 1.
    pub fn identity() -> Self {
        let mut store = ParamStore::new();
        for (name, cin, cout, k) in LAYERS {
            let src = match name {
                "dec2.conv1" => 32,
                "dec1.conv1" => 16,
                _ => 0,
            };
            let mut w = Array::zeros(&[cout, cin, k, k]);
            w.data_mut()[src * k * k + (k * k) / 2] = 1.0;
            store.insert(format!("{name}.weight"), w);
            store.insert(format!("{name}.bias"), Array::zeros(&[cout]));
        }
        Self { store }
    }

    /// Zeroes the output layer, making the network output identically 0.
    pub fn with_zero_output(mut self) -> Self {
        for name in ["out.weight", "out.bias"] {
            if let Some(a) = self.store.get_mut(name) {
                a.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        store.check_layout(&Self::identity().store)?;
        Ok(Self { store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn count(&self) -> usize {
        self.store.count()
    }

    /// Names of the convolution kernels (biases excluded).
    pub fn kernel_names() -> impl Iterator<Item = String> {
        LAYERS.iter().map(|(n, ..)| format!("{n}.weight"))
    }
}

fn conv(g: &mut Graph, x: Tensor, p: &Bound, name: &str) -> Result<Tensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), Padding::Same)
}

fn conv_act(g: &mut Graph, x: Tensor, p: &Bound, name: &str) -> Result<Tensor> {
    let y = conv(g, x, p, name)?;
    g.activation(y, Activation::LeakyRelu(LEAK))
}

/// Enhanced image `[N, 1, H, W]` in `(-1, 1)`. `H` and `W` must be
/// multiples of 4.
pub fn unet_forward(g: &mut Graph, image: Tensor, p: &Bound) -> Result<Tensor> {
    let (_, c, h, w) = g.value(image)?.dims4("unet")?;
    if c != 1 {
        return Err(Error::shape("unet", format!("expected 1 input channel, got {c}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(
            "unet",
            format!(
                "height and width must be multiples of 4, got {h}x{w}; pad by {} rows and {} columns",
                (4 - h % 4) % 4,
                (4 - w % 4) % 4
            ),
        ));
    }
    let x = conv_act(g, image, p, "enc1.conv1")?;
    let s1 = conv_act(g, x, p, "enc1.conv2")?;
    let x = g.pool_down(s1)?;
    let x = conv_act(g, x, p, "enc2.conv1")?;
    let s2 = conv_act(g, x, p, "enc2.conv2")?;
    let x = g.pool_down(s2)?;
    let x = conv_act(g, x, p, "bottom.conv1")?;
    let x = conv_act(g, x, p, "bottom.conv2")?;

    let x = g.upsample(x)?;
    let x = conv_act(g, x, p, "up2.conv")?;
    let x = g.concat_channels(x, s2)?;
    let x = conv_act(g, x, p, "dec2.conv1")?;
    let x = conv_act(g, x, p, "dec2.conv2")?;

    let x = g.upsample(x)?;
    let x = conv_act(g, x, p, "up1.conv")?;
    let x = g.concat_channels(x, s1)?;
    let x = conv_act(g, x, p, "dec1.conv1")?;
    let x = conv_act(g, x, p, "dec1.conv2")?;

    let y = conv(g, x, p, "out")?;
    g.tanh(y)
}

/// Rows and columns of padding that bring `(h, w)` up to multiples of 4.
pub fn padding_for(h: usize, w: usize) -> (usize, usize) {
    ((4 - h % 4) % 4, (4 - w % 4) % 4)
}

/// Runs the network on an image of any size: mirror-pads bottom and right
/// to multiples of 4, forwards, and crops back. Modality and mask carry over.
pub fn pad_and_forward(image: &Image2D, params: &UNetParams, precision: Precision) -> Result<Image2D> {
    let (ph, pw) = padding_for(image.height, image.width);
    let (h, w) = (image.height + ph, image.width + pw);
    let padded = Array::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        image.at(mirror_index(x, image.width), mirror_index(y, image.height))
    });
    let mut g = Graph::inference(precision);
    let bound = params.store().bind(&mut g)?;
    let input = g.input(padded)?;
    let out = unet_forward(&mut g, input, &bound)?;
    let full = g.value(out)?.data();
    let mut data = Vec::with_capacity(image.width * image.height);
    for y in 0..image.height {
        data.extend_from_slice(&full[y * w..y * w + image.width]);
    }
    let mut result = Image2D::new(image.width, image.height, data)?;
    result.modality = image.modality;
    result.fov = image.fov.clone();
    Ok(result)
}
