//! Class-conditional variational autoencoder: encode, reparameterize,
//! decode, ELBO loss, and class-conditional sampling for generative replay.
//!
//! Conditioning: a one-hot class vector enters the encoder as extra
//! constant input channels and is concatenated to `z` ahead of the
//! decoder. Passing no label uses all-zero conditioning, which is what
//! the classifier path uses at training and test time (labels are not
//! available when predicting).

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ckpt;
use crate::datasets::{Preset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::nn::conv::{conv_out_size, Conv2dCache, ConvT2dCache, LayerGrads};
use crate::nn::linear::LinearCache;
use crate::nn::{
    sigmoid, tanh_backward, tanh_forward, Conv2d, ConvTranspose2d, Linear, ParamBundle, Scalar,
    SliceCursor,
};

/// Log-variance is clamped to this symmetric range before use.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Decoder outputs are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the BCE.
pub const BCE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_shape: (usize, usize, usize),
    pub latent_dim: usize,
    pub num_condition_classes: usize,
    /// Channel widths of the conv stages; the decoder mirrors them.
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl VaeConfig {
    pub fn for_preset(p: &Preset) -> Self {
        Self {
            input_shape: p.input_shape,
            latent_dim: p.latent_dim,
            num_condition_classes: p.num_classes,
            encoder_channels: p.enc_channels.to_vec(),
            kernel: 4,
            stride: 2,
            pad: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.encoder_channels.is_empty() {
            return Err(Error::Config("latent_dim and encoder stages must be nonzero".into()));
        }
        for &(mut d) in &[self.input_shape.1, self.input_shape.2] {
            for _ in &self.encoder_channels {
                if d + 2 * self.pad < self.kernel {
                    return Err(Error::Config(format!(
                        "input {:?} too small for {} conv stages",
                        self.input_shape,
                        self.encoder_channels.len()
                    )));
                }
                d = conv_out_size(d, self.kernel, self.stride, self.pad);
            }
        }
        Ok(())
    }

    /// Spatial sizes from the input through every conv stage.
    pub fn spatial_trace(&self) -> Vec<(usize, usize)> {
        let mut trace = vec![(self.input_shape.1, self.input_shape.2)];
        for _ in &self.encoder_channels {
            let (h, w) = *trace.last().unwrap();
            trace.push((
                conv_out_size(h, self.kernel, self.stride, self.pad),
                conv_out_size(w, self.kernel, self.stride, self.pad),
            ));
        }
        trace
    }

    /// Flattened size of the deepest conv feature map.
    pub fn flat_dim(&self) -> usize {
        let (h, w) = *self.spatial_trace().last().unwrap();
        self.encoder_channels.last().unwrap() * h * w
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<S> {
    pub convs: Vec<Conv2d<S>>,
    pub fc: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct Decoder<S> {
    pub fc: Linear<S>,
    pub deconvs: Vec<ConvTranspose2d<S>>,
    start_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConditionalVae<S> {
    pub config: VaeConfig,
    pub encoder: Encoder<S>,
    pub decoder: Decoder<S>,
}

pub struct EncoderCache<S> {
    conv_caches: Vec<Conv2dCache<S>>,
    /// tanh outputs of every conv stage.
    acts: Vec<Array4<S>>,
    fc_cache: LinearCache<S>,
    /// 1 where logvar stayed inside the clamp range, else 0.
    clamp_mask: Array2<S>,
}

pub struct DecoderCache<S> {
    fc_cache: LinearCache<S>,
    fc_act: Array2<S>,
    deconv_caches: Vec<ConvT2dCache<S>>,
    /// tanh outputs between deconv stages (all but the last stage).
    acts: Vec<Array4<S>>,
}

/// Full forward cache of one conditioned pass.
pub struct VaeForward<S> {
    pub mu: Array2<S>,
    pub logvar: Array2<S>,
    pub z: Array2<S>,
    /// Decoder output after the sigmoid, in `(0, 1)`.
    pub x_hat: Array4<S>,
    eps: Option<Array2<S>>,
    enc: EncoderCache<S>,
    dec: DecoderCache<S>,
}

impl<S: Scalar> Encoder<S> {
    fn new<R: Rng>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let in_c = cfg.input_shape.0 + cfg.num_condition_classes;
        let mut convs = Vec::new();
        let mut prev = in_c;
        for &c in &cfg.encoder_channels {
            convs.push(Conv2d::new(rng, prev, c, cfg.kernel, cfg.stride, cfg.pad));
            prev = c;
        }
        let fc = Linear::new(rng, cfg.flat_dim(), 2 * cfg.latent_dim);
        Self { convs, fc }
    }

    fn forward(&self, xc: &Array4<S>, latent_dim: usize) -> (Array2<S>, Array2<S>, EncoderCache<S>) {
        let n = xc.dim().0;
        let mut conv_caches = Vec::new();
        let mut acts = Vec::new();
        let mut cur = xc.clone();
        for conv in &self.convs {
            let (y, cache) = conv.forward(&cur.view());
            let a = tanh_forward(&y);
            conv_caches.push(cache);
            acts.push(a.clone());
            cur = a;
        }
        let flat_len = cur.len() / n;
        debug_assert!(cur.is_standard_layout());
        let flat = cur.into_shape((n, flat_len)).unwrap();
        let (out, fc_cache) = self.fc.forward(&flat);
        let mu = out.slice(s![.., ..latent_dim]).to_owned();
        let raw_lv = out.slice(s![.., latent_dim..]).to_owned();
        let hi = S::from_f64(LOGVAR_CLAMP);
        let lo = -hi;
        let clamp_mask = raw_lv.mapv(|v| if v > lo && v < hi { S::one() } else { S::zero() });
        let logvar = raw_lv.mapv(|v| v.max(lo).min(hi));
        (
            mu,
            logvar,
            EncoderCache {
                conv_caches,
                acts,
                fc_cache,
                clamp_mask,
            },
        )
    }

    /// Backward from gradients on (mu, logvar). Returns parameter grads in
    /// canonical order (convs first, then fc).
    fn backward(
        &self,
        grad_mu: &Array2<S>,
        grad_logvar: &Array2<S>,
        cache: &EncoderCache<S>,
    ) -> Vec<LayerGrads<S>> {
        let n = grad_mu.dim().0;
        let masked_lv = grad_logvar * &cache.clamp_mask;
        let grad_out = ndarray::concatenate(Axis(1), &[grad_mu.view(), masked_lv.view()]).unwrap();
        let (grad_flat, fc_grads) = self.fc.backward(&grad_out, &cache.fc_cache);
        let last = cache.acts.last().unwrap();
        debug_assert!(grad_flat.is_standard_layout());
        let mut g = grad_flat.into_shape(last.dim()).unwrap();
        let mut rev_grads = vec![fc_grads];
        for i in (0..self.convs.len()).rev() {
            let g_pre = tanh_backward(&g, &cache.acts[i]);
            let (gx, lg) = self.convs[i].backward(&g_pre, &cache.conv_caches[i]);
            rev_grads.push(lg);
            g = gx;
        }
        let _ = n;
        rev_grads.reverse(); // convs in order, fc last
        rev_grads
    }
}

impl<S: Scalar> Decoder<S> {
    fn new<R: Rng>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let trace = cfg.spatial_trace();
        let ch = &cfg.encoder_channels;
        let deepest = *ch.last().unwrap();
        let (h0, w0) = *trace.last().unwrap();
        let fc = Linear::new(rng, cfg.latent_dim + cfg.num_condition_classes, deepest * h0 * w0);
        let mut deconvs = Vec::new();
        for i in (0..ch.len()).rev() {
            let in_c = ch[i];
            let out_c = if i == 0 { cfg.input_shape.0 } else { ch[i - 1] };
            deconvs.push(ConvTranspose2d::new(
                rng,
                in_c,
                out_c,
                cfg.kernel,
                cfg.stride,
                cfg.pad,
                trace[i],
            ));
        }
        Self {
            fc,
            deconvs,
            start_shape: (deepest, h0, w0),
        }
    }

    fn forward(&self, zc: &Array2<S>) -> (Array4<S>, DecoderCache<S>) {
        let n = zc.dim().0;
        let (c0, h0, w0) = self.start_shape;
        let (fc_out, fc_cache) = self.fc.forward(zc);
        let fc_act = tanh_forward(&fc_out);
        debug_assert!(fc_act.is_standard_layout());
        let mut cur = fc_act.clone().into_shape((n, c0, h0, w0)).unwrap();
        let mut deconv_caches = Vec::new();
        let mut acts = Vec::new();
        let last = self.deconvs.len() - 1;
        let mut x_hat = None;
        for (i, dc) in self.deconvs.iter().enumerate() {
            let (y, cache) = dc.forward(&cur.view());
            deconv_caches.push(cache);
            if i == last {
                x_hat = Some(sigmoid(&y));
            } else {
                let a = tanh_forward(&y);
                acts.push(a.clone());
                cur = a;
            }
        }
        (
            x_hat.unwrap(),
            DecoderCache {
                fc_cache,
                fc_act,
                deconv_caches,
                acts,
            },
        )
    }

    /// Backward from the gradient at the last deconv's pre-sigmoid output.
    /// Returns `(grad_zc, layer grads in canonical order: fc, deconvs...)`.
    fn backward(&self, grad_logits: &Array4<S>, cache: &DecoderCache<S>) -> (Array2<S>, Vec<LayerGrads<S>>) {
        let mut g = grad_logits.clone();
        let mut rev = Vec::new();
        for i in (0..self.deconvs.len()).rev() {
            let (gx, lg) = self.deconvs[i].backward(&g, &cache.deconv_caches[i]);
            rev.push(lg);
            if i > 0 {
                g = tanh_backward(&gx, &cache.acts[i - 1]);
            } else {
                let n = gx.dim().0;
                let flat_len = gx.len() / n;
                debug_assert!(gx.is_standard_layout());
                let flat = gx.into_shape((n, flat_len)).unwrap();
                let g_pre = tanh_backward(&flat, &cache.fc_act);
                let (grad_zc, fc_grads) = self.fc.backward(&g_pre, &cache.fc_cache);
                rev.push(fc_grads);
                rev.reverse(); // fc first, then deconvs in order
                return (grad_zc, rev);
            }
        }
        unreachable!("decoder has at least one deconv stage")
    }
}

impl<S: Scalar> ConditionalVae<S> {
    pub fn new<R: Rng>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(&config, rng),
            decoder: Decoder::new(&config, rng),
            config,
        })
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.config.num_condition_classes {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: self.config.num_condition_classes,
            });
        }
        Ok(())
    }

    fn onehot(&self, labels: Option<&[usize]>, n: usize) -> Result<Array2<S>> {
        let k = self.config.num_condition_classes;
        let mut cond = Array2::zeros((n, k));
        if let Some(ls) = labels {
            debug_assert_eq!(ls.len(), n);
            for (i, &y) in ls.iter().enumerate() {
                self.check_class(y)?;
                cond[[i, y]] = S::one();
            }
        }
        Ok(cond)
    }

    fn conditioned_input(&self, x: &Array4<S>, cond: &Array2<S>) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        let k = self.config.num_condition_classes;
        let mut xc = Array4::zeros((n, c + k, h, w));
        xc.slice_mut(s![.., ..c, .., ..]).assign(x);
        for i in 0..n {
            for j in 0..k {
                let v = cond[[i, j]];
                if v != S::zero() {
                    xc.slice_mut(s![i, c + j, .., ..]).fill(v);
                }
            }
        }
        xc
    }

    fn check_input(&self, x: &Array4<S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.config.input_shape),
                got: format!("({c}, {h}, {w})"),
            });
        }
        Ok(())
    }

    /// One conditioned pass. `labels = None` means zero conditioning;
    /// `eps = None` uses the posterior mean (`z = mu`).
    pub fn forward_batch(
        &self,
        x: &Array4<S>,
        labels: Option<&[usize]>,
        eps: Option<Array2<S>>,
    ) -> Result<VaeForward<S>> {
        self.check_input(x)?;
        let n = x.dim().0;
        let cond = self.onehot(labels, n)?;
        let xc = self.conditioned_input(x, &cond);
        let (mu, logvar, enc) = self.encoder.forward(&xc, self.config.latent_dim);
        let z = match &eps {
            Some(e) => reparameterize_batch(&mu, &logvar, e),
            None => mu.clone(),
        };
        let zc = ndarray::concatenate(Axis(1), &[z.view(), cond.view()]).unwrap();
        let (x_hat, dec) = self.decoder.forward(&zc);
        Ok(VaeForward {
            mu,
            logvar,
            z,
            x_hat,
            eps,
            enc,
            dec,
        })
    }

    /// Backward through the whole VAE.
    ///
    /// `grad_logits` is the loss gradient at the decoder's pre-sigmoid
    /// output; `grad_mu_ext` / `grad_logvar_ext` add direct terms on the
    /// posterior parameters (the KL part of the ELBO). Returns flat
    /// parameter gradients in the canonical [`ParamBundle`] order.
    pub fn backward_batch(
        &self,
        fwd: &VaeForward<S>,
        grad_logits: &Array4<S>,
        grad_mu_ext: Option<&Array2<S>>,
        grad_logvar_ext: Option<&Array2<S>>,
    ) -> Vec<S> {
        let (grad_zc, dec_grads) = self.decoder.backward(grad_logits, &fwd.dec);
        let zd = self.config.latent_dim;
        let grad_z = grad_zc.slice(s![.., ..zd]).to_owned();
        // z = mu + exp(logvar/2) * eps
        let mut grad_mu = grad_z.clone();
        let half = S::from_f64(0.5);
        let mut grad_logvar = match &fwd.eps {
            Some(e) => {
                let mut g = grad_z;
                g.zip_mut_with(&fwd.logvar, |gv, &lv| *gv *= half * (half * lv).exp());
                g.zip_mut_with(e, |gv, &ev| *gv *= ev);
                g
            }
            None => Array2::zeros(grad_mu.dim()),
        };
        if let Some(gm) = grad_mu_ext {
            grad_mu += gm;
        }
        if let Some(gl) = grad_logvar_ext {
            grad_logvar += gl;
        }
        let enc_grads = self.encoder.backward(&grad_mu, &grad_logvar, &fwd.enc);
        let mut flat = Vec::with_capacity(self.param_count());
        for lg in enc_grads.iter().chain(dec_grads.iter()) {
            flat.extend_from_slice(&lg.w);
            flat.extend_from_slice(&lg.b);
        }
        flat
    }

    /// Posterior parameters for one image under class conditioning.
    pub fn encode(&self, x: &Array3<S>, y: usize) -> Result<(Array1<S>, Array1<S>)> {
        self.check_class(y)?;
        let x4 = x
            .clone()
            .into_shape((1, x.dim().0, x.dim().1, x.dim().2))
            .unwrap();
        self.check_input(&x4)?;
        let cond = self.onehot(Some(&[y]), 1)?;
        let xc = self.conditioned_input(&x4, &cond);
        let (mu, logvar, _) = self.encoder.forward(&xc, self.config.latent_dim);
        Ok((
            mu.index_axis(Axis(0), 0).to_owned(),
            logvar.index_axis(Axis(0), 0).to_owned(),
        ))
    }

    /// Decode one latent vector under class conditioning.
    pub fn decode(&self, z: &Array1<S>, y: usize) -> Result<Array3<S>> {
        self.check_class(y)?;
        if z.len() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("latent dim {}", self.config.latent_dim),
                got: format!("{}", z.len()),
            });
        }
        let cond = self.onehot(Some(&[y]), 1)?;
        let z2 = z.clone().into_shape((1, z.len())).unwrap();
        let zc = ndarray::concatenate(Axis(1), &[z2.view(), cond.view()]).unwrap();
        let (x_hat, _) = self.decoder.forward(&zc);
        Ok(x_hat.index_axis(Axis(0), 0).to_owned())
    }

    /// Draw `n` synthetic samples of class `y` from the prior.
    ///
    /// The returned samples carry `task_label = 0`; the replay builder tags
    /// them with the owning task.
    pub fn sample_conditional<R: Rng>(&self, y: usize, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        self.check_class(y)?;
        if n < 1 {
            return Err(Error::Config("sample count must be >= 1".into()));
        }
        let zd = self.config.latent_dim;
        let z = Array2::from_shape_fn((n, zd), |_| {
            S::from_f64(rng.sample::<f64, _>(StandardNormal))
        });
        let cond = self.onehot(Some(&vec![y; n]), n)?;
        let zc = ndarray::concatenate(Axis(1), &[z.view(), cond.view()]).unwrap();
        let (x_hat, _) = self.decoder.forward(&zc);
        Ok((0..n)
            .map(|i| Sample {
                image: x_hat.index_axis(Axis(0), i).mapv(|v| v.to_f64() as f32),
                class_label: y,
                task_label: 0,
                provenance: Provenance::Synthetic,
            })
            .collect())
    }
}

impl<S: Scalar> ParamBundle<S> for ConditionalVae<S> {
    fn param_count(&self) -> usize {
        self.encoder
            .convs
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + self.encoder.fc.param_count()
            + self.decoder.fc.param_count()
            + self
                .decoder
                .deconvs
                .iter()
                .map(|l| l.param_count())
                .sum::<usize>()
    }

    fn append_params(&self, out: &mut Vec<S>) {
        for l in &self.encoder.convs {
            l.append_params(out);
        }
        self.encoder.fc.append_params(out);
        self.decoder.fc.append_params(out);
        for l in &self.decoder.deconvs {
            l.append_params(out);
        }
    }

    fn load_params(&mut self, src: &mut SliceCursor<'_, S>) {
        for l in &mut self.encoder.convs {
            l.load_params(src);
        }
        self.encoder.fc.load_params(src);
        self.decoder.fc.load_params(src);
        for l in &mut self.decoder.deconvs {
            l.load_params(src);
        }
    }
}

/// `z = mu + exp(logvar / 2) ⊙ eps`, elementwise over a batch.
pub fn reparameterize_batch<S: Scalar>(mu: &Array2<S>, logvar: &Array2<S>, eps: &Array2<S>) -> Array2<S> {
    let half = S::from_f64(0.5);
    let mut z = mu.clone();
    ndarray::Zip::from(&mut z)
        .and(logvar)
        .and(eps)
        .for_each(|zv, &lv, &ev| *zv += (half * lv).exp() * ev);
    z
}

/// Single-vector reparameterization.
pub fn reparameterize<S: Scalar>(mu: &Array1<S>, logvar: &Array1<S>, eps: &Array1<S>) -> Result<Array1<S>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("3 vectors of length {}", mu.len()),
            got: format!("{}, {}, {}", mu.len(), logvar.len(), eps.len()),
        });
    }
    let half = S::from_f64(0.5);
    Ok(Array1::from_iter(
        mu.iter()
            .zip(logvar)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<S> {
    pub reconstruction: S,
    pub kl: S,
    pub total: S,
}

/// Pixel-summed binary cross-entropy with the documented clamp.
pub fn bce_sum<'a, S: Scalar>(
    x: impl IntoIterator<Item = &'a S>,
    x_hat: impl IntoIterator<Item = &'a S>,
) -> S {
    let lo = S::from_f64(BCE_EPS);
    let hi = S::one() - lo;
    let mut acc = S::zero();
    for (&xv, &hv) in x.into_iter().zip(x_hat) {
        let h = hv.max(lo).min(hi);
        acc -= xv * h.ln() + (S::one() - xv) * (S::one() - h).ln();
    }
    acc
}

/// `-0.5 * sum_d (1 + logvar - mu^2 - exp(logvar))`, floored at zero.
pub fn kl_sum<'a, S: Scalar>(
    mu: impl IntoIterator<Item = &'a S>,
    logvar: impl IntoIterator<Item = &'a S>,
) -> S {
    let half = S::from_f64(0.5);
    let mut acc = S::zero();
    for (&m, &lv) in mu.into_iter().zip(logvar) {
        acc -= half * (S::one() + lv - m * m - lv.exp());
    }
    acc.max(S::zero())
}

/// ELBO terms for one sample (Eq. 2 shape: reconstruction + KL).
pub fn vae_loss<S: Scalar>(
    x: &Array3<S>,
    x_hat: &Array3<S>,
    mu: &Array1<S>,
    logvar: &Array1<S>,
) -> Result<LossBreakdown<S>> {
    if x.dim() != x_hat.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dim()),
            got: format!("{:?}", x_hat.dim()),
        });
    }
    if mu.len() != logvar.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("latent {}", mu.len()),
            got: format!("{}", logvar.len()),
        });
    }
    for v in x.iter().chain(x_hat.iter()) {
        if !v.is_finite() {
            return Err(Error::Config("non-finite input to vae_loss".into()));
        }
    }
    for v in mu.iter().chain(logvar.iter()) {
        if !v.is_finite() {
            return Err(Error::Config("non-finite posterior in vae_loss".into()));
        }
    }
    let reconstruction = bce_sum(x.iter(), x_hat.iter());
    let kl = kl_sum(mu.iter(), logvar.iter());
    Ok(LossBreakdown {
        reconstruction,
        kl,
        total: reconstruction + kl,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeCheckpointMeta {
    pub config: VaeConfig,
    pub dataset: String,
    pub created_task: usize,
}

pub fn save_vae<S: Scalar>(path: &Path, vae: &ConditionalVae<S>, meta: &VaeCheckpointMeta) -> Result<()> {
    let params: Vec<f32> = vae.flat_params().iter().map(|&p| p.to_f64() as f32).collect();
    ckpt::write_blob(path, "vae", &serde_json::to_value(meta)?, &params)
}

pub fn load_vae<S: Scalar>(path: &Path) -> Result<(ConditionalVae<S>, VaeCheckpointMeta)> {
    let (kind, meta, params) = ckpt::read_blob(path)?;
    if kind != "vae" {
        return Err(Error::Checkpoint(format!("expected vae blob, got {kind}")));
    }
    let meta: VaeCheckpointMeta = serde_json::from_value(meta)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut vae = ConditionalVae::new(meta.config.clone(), &mut rng)?;
    if params.len() != vae.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} != expected {}",
            params.len(),
            vae.param_count()
        )));
    }
    let typed: Vec<S> = params.iter().map(|&p| S::from_f32(p)).collect();
    vae.set_flat_params(&typed);
    Ok((vae, meta))
}
