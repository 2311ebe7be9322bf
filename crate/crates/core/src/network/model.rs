//! Encoder `E` and decoder `D`.
//!
//! The encoder maps `(B, H, W, C)` images to a `(B, h, w, d)` latent grid
//! whose flattened per-sample norm never exceeds `√L`; the decoder maps sphere
//! points back to images in `[-1, 1]`.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{DitBlock, LayerNorm, Linear, MixerLayer, RmsNorm, Rotary};
use super::params::{Init, ParamStore};
use super::positional::{rotary_2d, sinusoidal_2d};
use crate::batch::ImageBatch;
use crate::error::{Result, SphereError};
use crate::geometry::DEGENERATE_NORM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Null,
}

/// Per-sample conditioning as a weighted mix of embedding rows. Plain class
/// labels are one-hot; interpolation grids blend two labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    rows: Vec<Vec<(Label, f64)>>,
}

impl Condition {
    pub fn labels(labels: &[Label]) -> Self {
        Self {
            rows: labels.iter().map(|&l| vec![(l, 1.0)]).collect(),
        }
    }

    pub fn classes(ids: &[usize]) -> Self {
        Self::labels(&ids.iter().map(|&i| Label::Class(i)).collect::<Vec<_>>())
    }

    pub fn null(n: usize) -> Self {
        Self::labels(&vec![Label::Null; n])
    }

    /// Same label for `n` samples.
    pub fn repeat(label: Label, n: usize) -> Self {
        Self::labels(&vec![label; n])
    }

    pub fn from_rows(rows: Vec<Vec<(Label, f64)>>) -> Self {
        Self { rows }
    }

    /// `(1 − t)·a + t·b` in embedding space, one sample.
    pub fn blend_row(a: Label, b: Label, t: f64) -> Vec<(Label, f64)> {
        vec![(a, 1.0 - t), (b, t)]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// True when every sample is the pure null label.
    pub fn is_null(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.iter().all(|(l, w)| *l == Label::Null || *w == 0.0))
    }

    pub fn rows(&self) -> &[Vec<(Label, f64)>] {
        &self.rows
    }

    /// The null-label condition of the same batch size.
    pub fn to_null(&self) -> Self {
        Self::null(self.len())
    }
}

/// Forward-pass instrumentation, split by network and by whether the pass
/// was purely null-conditioned.
#[derive(Debug, Default)]
pub struct PassCounter {
    pub encoder_cond: AtomicUsize,
    pub encoder_null: AtomicUsize,
    pub decoder_cond: AtomicUsize,
    pub decoder_null: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCounts {
    pub encoder_cond: usize,
    pub encoder_null: usize,
    pub decoder_cond: usize,
    pub decoder_null: usize,
}

impl PassCounts {
    pub fn total(&self) -> usize {
        self.encoder_cond + self.encoder_null + self.decoder_cond + self.decoder_null
    }
}

impl PassCounter {
    pub fn snapshot(&self) -> PassCounts {
        PassCounts {
            encoder_cond: self.encoder_cond.load(Ordering::Relaxed),
            encoder_null: self.encoder_null.load(Ordering::Relaxed),
            decoder_cond: self.decoder_cond.load(Ordering::Relaxed),
            decoder_null: self.decoder_null.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.encoder_cond, &self.encoder_null, &self.decoder_cond, &self.decoder_null] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    patch_embed: Linear,
    class_table: Tensor,
    blocks: Vec<DitBlock>,
    final_norm: LayerNorm,
    mixers: Vec<MixerLayer>,
    to_latent: Linear,
    latent_norm: RmsNorm,
}

#[derive(Debug, Clone)]
struct Decoder {
    from_latent: Linear,
    class_table: Tensor,
    mixers: Vec<MixerLayer>,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    head: Linear,
}

/// The full encoder/decoder pair with shared positional state.
#[derive(Debug)]
pub struct SphereModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    rotary: Rotary,
    abs_pos: Tensor,
    counter: PassCounter,
}

fn build_blocks(
    store: &mut ParamStore,
    prefix: &str,
    c: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DitBlock>> {
    (0..c.n_blocks)
        .map(|i| {
            DitBlock::new(
                store,
                &format!("{prefix}.blocks.{i:02}"),
                c.hidden_size,
                c.n_heads,
                c.mlp_ratio,
                rng,
            )
        })
        .collect()
}

fn build_mixers(
    store: &mut ParamStore,
    prefix: &str,
    c: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MixerLayer>> {
    (0..c.mixer_depth)
        .map(|i| {
            MixerLayer::new(
                store,
                &format!("{prefix}.mixer.{i:02}"),
                c.n_tokens(),
                c.hidden_size,
                c.mlp_ratio,
                rng,
            )
        })
        .collect()
}

impl SphereModel {
    /// Builds a freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let rows = c.embedding_rows();
        let emb_init = Init::Normal { std: 0.02 };

        let encoder = Encoder {
            patch_embed: Linear::new(&mut store, "enc.patch_embed", c.patch_dim(), c.hidden_size, false, &mut rng)?,
            class_table: store.add("enc.class_table", &[rows, c.hidden_size], emb_init, &mut rng)?,
            blocks: build_blocks(&mut store, "enc", c, &mut rng)?,
            final_norm: LayerNorm::new(&mut store, "enc.final_norm", c.hidden_size, &mut rng)?,
            mixers: build_mixers(&mut store, "enc", c, &mut rng)?,
            to_latent: Linear::new(&mut store, "enc.to_latent", c.hidden_size, c.latent_channels, false, &mut rng)?,
            latent_norm: RmsNorm::new(&mut store, "enc.latent_norm", c.latent_channels, &mut rng)?,
        };
        let decoder = Decoder {
            from_latent: Linear::new(&mut store, "dec.from_latent", c.latent_channels, c.hidden_size, false, &mut rng)?,
            class_table: store.add("dec.class_table", &[rows, c.hidden_size], emb_init, &mut rng)?,
            mixers: build_mixers(&mut store, "dec", c, &mut rng)?,
            blocks: build_blocks(&mut store, "dec", c, &mut rng)?,
            final_ada: Linear::new(&mut store, "dec.final_ada", c.hidden_size, 2 * c.hidden_size, true, &mut rng)?,
            head: Linear::new(&mut store, "dec.head", c.hidden_size, c.patch_dim(), true, &mut rng)?,
        };

        let device = store.device().clone();
        let n = c.n_tokens();
        let (cos, sin) = rotary_2d(c.grid(), c.head_dim());
        let rotary = Rotary {
            cos: Tensor::from_vec(cos, (n, c.head_dim()), &device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (n, c.head_dim()), &device)?.to_dtype(dtype)?,
        };
        let abs_pos = Tensor::from_vec(sinusoidal_2d(c.grid(), c.hidden_size), (n, c.hidden_size), &device)?
            .to_dtype(dtype)?;

        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            rotary,
            abs_pos,
            counter: PassCounter::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    /// `(B, rows)` mixing weights for the embedding table.
    fn condition_weights(&self, cond: &Condition) -> Result<Tensor> {
        let rows = self.config.embedding_rows();
        let n_classes = self.config.n_classes;
        let mut w = vec![0.0f64; cond.len() * rows];
        for (i, row) in cond.rows().iter().enumerate() {
            for &(label, weight) in row {
                let idx = match label {
                    Label::Null => rows - 1,
                    Label::Class(id) if id < n_classes => id,
                    Label::Class(id) => return Err(SphereError::InvalidClass { id, n_classes }),
                };
                w[i * rows + idx] += weight;
            }
        }
        Ok(Tensor::from_vec(w, (cond.len(), rows), self.store.device())?.to_dtype(self.dtype())?)
    }

    fn embed(&self, table: &Tensor, cond: &Condition) -> Result<Tensor> {
        Ok(self.condition_weights(cond)?.matmul(table)?.silu()?)
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let c = &self.config;
        let dims = x.dims();
        if dims.len() != 4 || dims[1..] != [c.image_size, c.image_size, c.channels] {
            return Err(SphereError::ConfigMismatch(format!(
                "image batch shape {:?} does not match (B, {}, {}, {})",
                dims, c.image_size, c.image_size, c.channels
            )));
        }
        Ok(dims[0])
    }

    fn check_condition(&self, cond: &Condition, batch: usize) -> Result<()> {
        if cond.len() != batch {
            return Err(SphereError::shape(batch, cond.len()));
        }
        Ok(())
    }

    fn count(&self, encoder: bool, cond: &Condition) {
        let slot = match (encoder, cond.is_null() && self.config.is_conditional()) {
            (true, false) => &self.counter.encoder_cond,
            (true, true) => &self.counter.encoder_null,
            (false, false) => &self.counter.decoder_cond,
            (false, true) => &self.counter.decoder_null,
        };
        slot.fetch_add(1, Ordering::Relaxed);
    }

    /// `(B, H, W, C)` → `(B, N, P·P·C)`.
    fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, g, p) = (x.dim(0)?, c.grid(), c.patch_size);
        Ok(x.reshape((b, g, p, g, p, c.channels))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g * g, c.patch_dim()))?)
    }

    /// `(B, N, P·P·C)` → `(B, H, W, C)`.
    fn unpatchify(&self, t: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, g, p) = (t.dim(0)?, c.grid(), c.patch_size);
        Ok(t.reshape((b, g, g, p, p, c.channels))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, c.image_size, c.image_size, c.channels))?)
    }

    /// Encoder output `z` of shape `(B, h, w, d)`, before spherification.
    pub fn encode(&self, x: &Tensor, cond: &Condition) -> Result<Tensor> {
        let b = self.check_images(x)?;
        self.check_condition(cond, b)?;
        self.count(true, cond);
        let enc = &self.encoder;
        let c = &self.config;
        let emb = self.embed(&enc.class_table, cond)?;
        let mut h = enc
            .patch_embed
            .forward(&self.patchify(&x.to_dtype(self.dtype())?)?)?
            .broadcast_add(&self.abs_pos)?;
        for block in &enc.blocks {
            h = block.forward(&h, &emb, &self.rotary)?;
        }
        h = enc.final_norm.forward(&h)?;
        for mixer in &enc.mixers {
            h = mixer.forward(&h)?;
        }
        let z = enc.latent_norm.forward(&enc.to_latent.forward(&h)?)?;
        let z = bound_norm(&z, (c.latent_len() as f64).sqrt())?;
        Ok(z.reshape((b, c.grid(), c.grid(), c.latent_channels))?)
    }

    /// Decodes `(B, L)` or `(B, h, w, d)` sphere points into `(B, H, W, C)` images.
    pub fn decode(&self, v: &Tensor, cond: &Condition) -> Result<Tensor> {
        let c = &self.config;
        let b = v.dim(0)?;
        if v.elem_count() != b * c.latent_len() {
            return Err(SphereError::ConfigMismatch(format!(
                "latent shape {:?} does not match latent length {}",
                v.dims(),
                c.latent_len()
            )));
        }
        self.check_condition(cond, b)?;
        self.count(false, cond);
        let dec = &self.decoder;
        let emb = self.embed(&dec.class_table, cond)?;
        let tokens = v
            .to_dtype(self.dtype())?
            .reshape((b, c.n_tokens(), c.latent_channels))?;
        let mut h = dec.from_latent.forward(&tokens)?.broadcast_add(&self.abs_pos)?;
        for mixer in &dec.mixers {
            h = mixer.forward(&h)?;
        }
        for block in &dec.blocks {
            h = block.forward(&h, &emb, &self.rotary)?;
        }
        let m = dec.final_ada.forward(&emb)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        let h = super::layers::modulate(&super::layers::layer_norm(&h)?, &m[0], &m[1])?;
        let out = dec.head.forward(&h)?;
        Ok(self.unpatchify(&out)?.tanh()?)
    }

    /// Converts an [`ImageBatch`] into a model-dtype tensor.
    pub fn images_to_tensor(&self, batch: &ImageBatch) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &batch.data,
            (batch.n, batch.height, batch.width, batch.channels),
            self.store.device(),
        )?
        .to_dtype(self.dtype())?)
    }
}

/// Rescales each sample so that its flattened norm is at most `radius`.
pub fn bound_norm(z: &Tensor, radius: f64) -> Result<Tensor> {
    let b = z.dim(0)?;
    let flat = z.reshape((b, ()))?;
    let norms = flat.sqr()?.sum_keepdim(1)?.sqrt()?;
    let scale = norms.recip()?.affine(radius, 0.0)?.minimum(1.0)?;
    Ok(flat.broadcast_mul(&scale)?.reshape(z.dims())?)
}

/// Batched spherification: each sample flattened and rescaled to norm `√L`.
/// Output shape `(B, L)`.
pub fn spherify_batch(z: &Tensor) -> Result<Tensor> {
    let b = z.dim(0)?;
    let flat = z.reshape((b, ()))?;
    let len = flat.dim(1)?;
    let norms = flat.sqr()?.sum_keepdim(1)?.sqrt()?;
    let min = norms
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(min >= DEGENERATE_NORM) {
        return Err(SphereError::DegenerateLatent { norm: min });
    }
    Ok(flat.broadcast_div(&norms)?.affine((len as f64).sqrt(), 0.0)?)
}

/// Batched `spherify(v + σ_i·e_i)` with per-sample magnitudes `sigma: (B,)`.
pub fn noisy_spherify_batch(v: &Tensor, e: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let perturbed = v.add(&e.broadcast_mul(&sigma.unsqueeze(1)?)?)?;
    spherify_batch(&perturbed)
}

/// Converts a `(B, H, W, C)` tensor back into an [`ImageBatch`].
pub fn tensor_to_images(t: &Tensor) -> Result<ImageBatch> {
    let (n, h, w, c) = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ImageBatch {
        n,
        height: h,
        width: w,
        channels: c,
        data,
    })
}
