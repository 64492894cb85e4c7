//! Variational building blocks and both variational extensions of the
//! paired model: the VPAE (both autoencoders variational, latent maps
//! carrying mean/log-std pairs, trained with four ELBO terms) and the
//! variational latent mapping (deterministic autoencoders with a stochastic
//! map between their latent spaces).

use crate::error::{Error, Result};
use crate::nn::{GaussianLatent, MlpNet};
use crate::optim::{adam_step, AdamState};
use crate::paired::gather_rows;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Variational autoencoder: an encoder with stacked (mu, log-std) heads, a
/// deterministic mean decoder, and the Gaussian likelihood scale `sigma`.
#[derive(Debug, Clone)]
pub struct VariationalAe {
    pub encoder: MlpNet,
    pub decoder: MlpNet,
    pub latent_dim: usize,
    pub sigma: f64,
}

impl VariationalAe {
    pub fn new(encoder: MlpNet, decoder: MlpNet, sigma: f64) -> Result<VariationalAe> {
        let latent_dim = decoder.in_dim();
        if encoder.out_dim() != 2 * latent_dim {
            return Err(Error::shape(
                format!("encoder output {} (2 x latent)", 2 * latent_dim),
                format!("{}", encoder.out_dim()),
            ));
        }
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        Ok(VariationalAe {
            encoder,
            decoder,
            latent_dim,
            sigma,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    /// Splits stacked encoder output into (mu, log_std) halves.
    fn split_heads(&self, h: &Tensor) -> (Tensor, Tensor) {
        split_halves(h, self.latent_dim)
    }

    /// Gaussian latent for a single input row.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianLatent> {
        let (h, _) = self.encoder.forward(x)?;
        let (mu, ls) = self.split_heads(&h);
        GaussianLatent::new(
            Tensor::vector(mu.row(0).to_vec()),
            Tensor::vector(ls.row(0).to_vec()),
        )
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }
}

fn split_halves(h: &Tensor, dim: usize) -> (Tensor, Tensor) {
    let b = h.rows();
    let mut mu = Tensor::zeros(&[b, dim]);
    let mut ls = Tensor::zeros(&[b, dim]);
    for r in 0..b {
        mu.row_mut(r).copy_from_slice(&h.row(r)[..dim]);
        ls.row_mut(r).copy_from_slice(&h.row(r)[dim..]);
    }
    (mu, ls)
}

fn concat_halves(mu: &Tensor, ls: &Tensor) -> Tensor {
    let b = mu.rows();
    let dim = mu.cols();
    let mut h = Tensor::zeros(&[b, 2 * dim]);
    for r in 0..b {
        h.row_mut(r)[..dim].copy_from_slice(mu.row(r));
        h.row_mut(r)[dim..].copy_from_slice(ls.row(r));
    }
    h
}

fn draw_eps(rng: &mut RngState, b: usize, dim: usize) -> Tensor {
    crate::rng::gaussian_sample(rng, &[b, dim], 0.0, 1.0).expect("std 1 is valid")
}

/// Per-batch KL to the standard normal, summed over samples.
fn kl_batch(mu: &Tensor, ls: &Tensor) -> f64 {
    let mut acc = 0.0;
    for i in 0..mu.len() {
        let m = mu.data()[i];
        let l = ls.data()[i];
        acc += m * m + (2.0 * l).exp() - 1.0 - 2.0 * l;
    }
    0.5 * acc
}

/// Negative-ELBO training loss for one VAE over a batch: mean over samples
/// of `(1/(2 sigma)) ||d(z) - x||^2 + KL(q(z|x) || N(0, I))`, one
/// reparameterized draw per sample. Returns the loss and the flat gradient
/// for `[encoder, decoder]` parameters.
pub fn elbo_loss(vae: &VariationalAe, batch: &Tensor, rng: &mut RngState) -> Result<(f64, Vec<f64>)> {
    let b = batch.rows();
    let (h, enc_tape) = vae.encoder.forward(batch)?;
    let (mu, ls) = vae.split_heads(&h);
    let eps = draw_eps(rng, b, vae.latent_dim);
    let std = ls.map(f64::exp);
    let z = mu.add(&std.hadamard(&eps));
    let (xr, dec_tape) = vae.decoder.forward(&z)?;

    let diff = xr.sub(batch);
    let recon = diff.norm().powi(2) / (2.0 * vae.sigma * b as f64);
    let kl = kl_batch(&mu, &ls) / b as f64;
    let loss = recon + kl;

    // d recon / d xr.
    let d_xr = diff.scale(1.0 / (vae.sigma * b as f64));
    let dec_grads = vae.decoder.backward(&dec_tape, &d_xr)?;
    let d_z = &dec_grads.d_input;
    // Head gradients: z = mu + exp(ls) eps, plus the KL closed form.
    let d_mu = d_z.add(&mu.scale(1.0 / b as f64));
    let d_ls = d_z
        .hadamard(&eps)
        .hadamard(&std)
        .add(&ls.map(|l| (2.0 * l).exp() - 1.0).scale(1.0 / b as f64));
    let enc_grads = vae.encoder.backward(&enc_tape, &concat_halves(&d_mu, &d_ls))?;

    let mut flat = Vec::with_capacity(vae.param_count());
    for l in 0..vae.encoder.specs().len() {
        flat.extend_from_slice(enc_grads.d_weights[l].data());
        flat.extend_from_slice(enc_grads.d_biases[l].data());
    }
    for l in 0..vae.decoder.specs().len() {
        flat.extend_from_slice(dec_grads.d_weights[l].data());
        flat.extend_from_slice(dec_grads.d_biases[l].data());
    }
    Ok((loss, flat))
}

/// Variational paired autoencoder. The latent maps are single trainable
/// matrices acting on the concatenated `(mu || log_std)` head vector:
/// `map_fwd: 2 r_x -> 2 r_y`, `map_inv: 2 r_y -> 2 r_x`.
#[derive(Debug, Clone)]
pub struct VpaeModel {
    pub ae_x: VariationalAe,
    pub ae_y: VariationalAe,
    pub map_fwd: Tensor,
    pub map_inv: Tensor,
}

impl VpaeModel {
    pub fn new(
        ae_x: VariationalAe,
        ae_y: VariationalAe,
        map_fwd: Tensor,
        map_inv: Tensor,
    ) -> Result<VpaeModel> {
        let (rx, ry) = (ae_x.latent_dim, ae_y.latent_dim);
        if map_fwd.shape() != [2 * ry, 2 * rx] {
            return Err(Error::shape(
                format!("[{}, {}]", 2 * ry, 2 * rx),
                format!("{:?}", map_fwd.shape()),
            ));
        }
        if map_inv.shape() != [2 * rx, 2 * ry] {
            return Err(Error::shape(
                format!("[{}, {}]", 2 * rx, 2 * ry),
                format!("{:?}", map_inv.shape()),
            ));
        }
        Ok(VpaeModel {
            ae_x,
            ae_y,
            map_fwd,
            map_inv,
        })
    }

    /// Default dense VPAE mirroring `PairedModel::mlp_default`.
    pub fn mlp_default(
        n_x: usize,
        n_y: usize,
        r_x: usize,
        r_y: usize,
        widths: &[usize],
        sigma: f64,
        rng: &mut RngState,
    ) -> Result<VpaeModel> {
        use crate::nn::{Activation, LayerSpec};
        let enc = |input: usize, r: usize, rng: &mut RngState| -> Result<MlpNet> {
            let mut specs = Vec::new();
            let mut prev = input;
            for &w in widths {
                specs.push(LayerSpec::new(prev, w, Activation::Relu));
                prev = w;
            }
            specs.push(LayerSpec::new(prev, 2 * r, Activation::Identity));
            MlpNet::init(specs, rng)
        };
        let dec = |r: usize, output: usize, rng: &mut RngState| -> Result<MlpNet> {
            let mut specs = Vec::new();
            let mut prev = r;
            for &w in widths.iter().rev() {
                specs.push(LayerSpec::new(prev, w, Activation::Relu));
                prev = w;
            }
            specs.push(LayerSpec::new(prev, output, Activation::Sigmoid));
            MlpNet::init(specs, rng)
        };
        let ae_x = VariationalAe::new(enc(n_x, r_x, rng)?, dec(r_x, n_x, rng)?, sigma)?;
        let ae_y = VariationalAe::new(enc(n_y, r_y, rng)?, dec(r_y, n_y, rng)?, sigma)?;
        let bound = (6.0 / (2 * r_x + 2 * r_y) as f64).sqrt();
        let mut map_fwd = Tensor::zeros(&[2 * r_y, 2 * r_x]);
        for v in map_fwd.data_mut() {
            *v = rng.uniform_in(-bound, bound);
        }
        let mut map_inv = Tensor::zeros(&[2 * r_x, 2 * r_y]);
        for v in map_inv.data_mut() {
            *v = rng.uniform_in(-bound, bound);
        }
        VpaeModel::new(ae_x, ae_y, map_fwd, map_inv)
    }

    pub fn param_count(&self) -> usize {
        self.ae_x.param_count() + self.ae_y.param_count() + self.map_fwd.len() + self.map_inv.len()
    }

    pub fn collect_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.ae_x.encoder.append_params(&mut out);
        self.ae_x.decoder.append_params(&mut out);
        self.ae_y.encoder.append_params(&mut out);
        self.ae_y.decoder.append_params(&mut out);
        out.extend_from_slice(self.map_fwd.data());
        out.extend_from_slice(self.map_inv.data());
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                format!("{} parameters", self.param_count()),
                format!("{}", flat.len()),
            ));
        }
        let mut off = 0;
        for net in [
            &mut self.ae_x.encoder,
            &mut self.ae_x.decoder,
            &mut self.ae_y.encoder,
            &mut self.ae_y.decoder,
        ] {
            let n = net.param_count();
            net.load_params(&flat[off..off + n])?;
            off += n;
        }
        let n = self.map_fwd.len();
        self.map_fwd.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
        let n = self.map_inv.len();
        self.map_inv.data_mut().copy_from_slice(&flat[off..off + n]);
        Ok(())
    }

    /// Mapped Gaussian on the model side for one observation row:
    /// `(mu_x, log_std_x) = M+ (mu_y || log_std_y)`.
    pub fn map_inverse_latent(&self, y: &Tensor) -> Result<GaussianLatent> {
        let (h, _) = self.ae_y.encoder.forward(y)?;
        let mapped = h.matmul(&self.map_inv.transpose());
        let (mu, ls) = split_halves(&mapped, self.ae_x.latent_dim);
        GaussianLatent::new(
            Tensor::vector(mu.row(0).to_vec()),
            Tensor::vector(ls.row(0).to_vec()),
        )
    }

    /// Deterministic direct estimate: decode the mapped mean.
    pub fn direct_estimate(&self, y: &Tensor) -> Result<Tensor> {
        let g = self.map_inverse_latent(y)?;
        let z = g.mu.reshape(&[1, self.ae_x.latent_dim])?;
        let (x, _) = self.ae_x.decoder.forward(&z)?;
        Ok(x)
    }
}

/// Which of the four ELBO terms to evaluate (data AE, model AE,
/// model->data, data->model). `vpae_loss` enables all four.
pub type VpaeTermMask = [bool; 4];

/// Per-term reconstruction and KL pieces of the VPAE loss.
#[derive(Debug, Clone, Default)]
pub struct VpaeBreakdown {
    pub recon: [f64; 4],
    pub kl: [f64; 4],
}

impl VpaeBreakdown {
    pub fn total(&self) -> f64 {
        self.recon.iter().sum::<f64>() + self.kl.iter().sum::<f64>()
    }
}

/// Four-ELBO VPAE training loss over aligned `(x, y)` pairs, one
/// reparameterized draw per term per sample. Gradients are for
/// `[enc_x, dec_x, enc_y, dec_y, map_fwd, map_inv]`.
pub fn vpae_loss(
    vpae: &VpaeModel,
    xs: &Tensor,
    ys: &Tensor,
    rng: &mut RngState,
) -> Result<(f64, Vec<f64>, VpaeBreakdown)> {
    vpae_loss_masked(vpae, xs, ys, rng, [true; 4])
}

/// VPAE loss with selectable terms. Masked terms draw no noise, so the
/// active terms consume the rng stream in term order.
pub fn vpae_loss_masked(
    vpae: &VpaeModel,
    xs: &Tensor,
    ys: &Tensor,
    rng: &mut RngState,
    mask: VpaeTermMask,
) -> Result<(f64, Vec<f64>, VpaeBreakdown)> {
    if xs.rows() != ys.rows() {
        return Err(Error::shape(
            format!("{} x-rows", xs.rows()),
            format!("{} y-rows", ys.rows()),
        ));
    }
    let b = xs.rows();
    let bf = b as f64;
    let (rx, ry) = (vpae.ae_x.latent_dim, vpae.ae_y.latent_dim);
    let (sx, sy) = (vpae.ae_x.sigma, vpae.ae_y.sigma);

    let (hx, tape_ex) = vpae.ae_x.encoder.forward(xs)?;
    let (hy, tape_ey) = vpae.ae_y.encoder.forward(ys)?;
    let (mux, lsx) = split_halves(&hx, rx);
    let (muy, lsy) = split_halves(&hy, ry);

    let mut breakdown = VpaeBreakdown::default();
    let mut d_hx = Tensor::zeros(hx.shape());
    let mut d_hy = Tensor::zeros(hy.shape());
    let mut d_map_fwd = Tensor::zeros(vpae.map_fwd.shape());
    let mut d_map_inv = Tensor::zeros(vpae.map_inv.shape());
    // Decoder gradients accumulate across the two terms that use each decoder.
    let mut dec_x_acc: Vec<f64> = vec![0.0; vpae.ae_x.decoder.param_count()];
    let mut dec_y_acc: Vec<f64> = vec![0.0; vpae.ae_y.decoder.param_count()];

    // One ELBO term: sample from (mu, ls), decode, compare against target.
    // Returns head gradients (d_mu, d_ls) and accumulates decoder grads.
    let mut run_term = |term: usize,
                        mu: &Tensor,
                        ls: &Tensor,
                        decoder: &MlpNet,
                        dec_acc: &mut Vec<f64>,
                        target: &Tensor,
                        sigma: f64,
                        rng: &mut RngState|
     -> Result<(Tensor, Tensor)> {
        let eps = draw_eps(rng, b, mu.cols());
        let std = ls.map(f64::exp);
        let z = mu.add(&std.hadamard(&eps));
        let (out, dec_tape) = decoder.forward(&z)?;
        let diff = out.sub(target);
        breakdown.recon[term] = diff.norm().powi(2) / (2.0 * sigma * bf);
        breakdown.kl[term] = kl_batch(mu, ls) / bf;
        let d_out = diff.scale(1.0 / (sigma * bf));
        let grads = decoder.backward(&dec_tape, &d_out)?;
        let mut off = 0;
        for l in 0..decoder.specs().len() {
            for &v in grads.d_weights[l].data() {
                dec_acc[off] += v;
                off += 1;
            }
            for &v in grads.d_biases[l].data() {
                dec_acc[off] += v;
                off += 1;
            }
        }
        let d_z = grads.d_input;
        let d_mu = d_z.add(&mu.scale(1.0 / bf));
        let d_ls = d_z
            .hadamard(&eps)
            .hadamard(&std)
            .add(&ls.map(|l| (2.0 * l).exp() - 1.0).scale(1.0 / bf));
        Ok((d_mu, d_ls))
    };

    // Term 0: x-autoencoder ELBO (reconstructs x).
    if mask[0] {
        let (d_mu, d_ls) = run_term(0, &mux, &lsx, &vpae.ae_x.decoder, &mut dec_x_acc, xs, sx, rng)?;
        d_hx.axpy(1.0, &concat_halves(&d_mu, &d_ls));
    }
    // Term 1: y-autoencoder ELBO (reconstructs y).
    if mask[1] {
        let (d_mu, d_ls) = run_term(1, &muy, &lsy, &vpae.ae_y.decoder, &mut dec_y_acc, ys, sy, rng)?;
        d_hy.axpy(1.0, &concat_halves(&d_mu, &d_ls));
    }
    // Term 2: model -> data; M carries (mu_x || ls_x) to the y side.
    if mask[2] {
        let h_mapped = hx.matmul(&vpae.map_fwd.transpose());
        let (mu_hat, ls_hat) = split_halves(&h_mapped, ry);
        let (d_mu, d_ls) = run_term(
            2,
            &mu_hat,
            &ls_hat,
            &vpae.ae_y.decoder,
            &mut dec_y_acc,
            ys,
            sy,
            rng,
        )?;
        let d_mapped = concat_halves(&d_mu, &d_ls);
        d_map_fwd.axpy(1.0, &d_mapped.transpose().matmul(&hx));
        d_hx.axpy(1.0, &d_mapped.matmul(&vpae.map_fwd));
    }
    // Term 3: data -> model; M+ carries (mu_y || ls_y) to the x side.
    if mask[3] {
        let h_mapped = hy.matmul(&vpae.map_inv.transpose());
        let (mu_hat, ls_hat) = split_halves(&h_mapped, rx);
        let (d_mu, d_ls) = run_term(
            3,
            &mu_hat,
            &ls_hat,
            &vpae.ae_x.decoder,
            &mut dec_x_acc,
            xs,
            sx,
            rng,
        )?;
        let d_mapped = concat_halves(&d_mu, &d_ls);
        d_map_inv.axpy(1.0, &d_mapped.transpose().matmul(&hy));
        d_hy.axpy(1.0, &d_mapped.matmul(&vpae.map_inv));
    }

    let enc_x_grads = vpae.ae_x.encoder.backward(&tape_ex, &d_hx)?;
    let enc_y_grads = vpae.ae_y.encoder.backward(&tape_ey, &d_hy)?;

    let mut flat = Vec::with_capacity(vpae.param_count());
    for l in 0..vpae.ae_x.encoder.specs().len() {
        flat.extend_from_slice(enc_x_grads.d_weights[l].data());
        flat.extend_from_slice(enc_x_grads.d_biases[l].data());
    }
    flat.extend_from_slice(&dec_x_acc);
    for l in 0..vpae.ae_y.encoder.specs().len() {
        flat.extend_from_slice(enc_y_grads.d_weights[l].data());
        flat.extend_from_slice(enc_y_grads.d_biases[l].data());
    }
    flat.extend_from_slice(&dec_y_acc);
    flat.extend_from_slice(d_map_fwd.data());
    flat.extend_from_slice(d_map_inv.data());

    Ok((breakdown.total(), flat, breakdown))
}

/// Plain stochastic-training hyperparameters for the variational models.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> SgdConfig {
        SgdConfig {
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// ADAM minimization of the four-ELBO VPAE loss; deterministic under seed.
pub fn train_vpae(
    mut vpae: VpaeModel,
    xs: &Tensor,
    ys: &Tensor,
    cfg: &SgdConfig,
) -> Result<(VpaeModel, Vec<f64>)> {
    let n = xs.rows();
    let mut params = Tensor::vector(vpae.collect_params());
    let mut adam = AdamState::new(&[params.len()], cfg.lr);
    let mut rng = RngState::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.next_below(i + 1));
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx = gather_rows(xs, chunk);
            let by = gather_rows(ys, chunk);
            let (loss, grads, _) = vpae_loss(&vpae, &bx, &by, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let (next, st) = adam_step(&params, &Tensor::vector(grads), &adam)?;
            params = next;
            adam = st;
            vpae.set_params(params.data())?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok((vpae, epoch_losses))
}

/// Sampling inference: encode `y` once, map the Gaussian once through `M+`,
/// then draw `n` latents and decode each.
pub fn vpae_sample_inference(
    vpae: &VpaeModel,
    y: &Tensor,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let g = vpae.map_inverse_latent(y)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = crate::nn::reparameterize(&g, rng);
        let (x, _) = vpae
            .ae_x
            .decoder
            .forward(&z.reshape(&[1, vpae.ae_x.latent_dim])?)?;
        out.push(Tensor::vector(x.row(0).to_vec()));
    }
    Ok(out)
}

/// Elementwise mean and (n-1)-denominator standard deviation of a sample
/// list.
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub mean: Tensor,
    pub std: Tensor,
    pub n: usize,
}

pub fn pixel_stats(samples: &[Tensor]) -> Result<SampleStats> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let shape = samples[0].shape().to_vec();
    for s in samples {
        if s.shape() != shape {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?}", s.shape())));
        }
    }
    let n = samples.len() as f64;
    let mut mean = Tensor::zeros(&shape);
    for s in samples {
        mean.axpy(1.0 / n, s);
    }
    let mut var = Tensor::zeros(&shape);
    for s in samples {
        let d = s.sub(&mean);
        var.axpy(1.0 / (n - 1.0), &d.hadamard(&d));
    }
    Ok(SampleStats {
        mean,
        std: var.map(f64::sqrt),
        n: samples.len(),
    })
}

/// Stochastic map between frozen deterministic latent spaces: a
/// non-compressive Gaussian encoder on `z_y` and a deterministic decoder
/// into `z_x`.
#[derive(Debug, Clone)]
pub struct VariationalLatentMap {
    pub encoder: MlpNet,
    pub decoder: MlpNet,
    pub sigma: f64,
}

impl VariationalLatentMap {
    pub fn new(encoder: MlpNet, decoder: MlpNet, sigma: f64) -> Result<VariationalLatentMap> {
        if encoder.out_dim() != 2 * decoder.in_dim() {
            return Err(Error::shape(
                format!("encoder output {} (2 x decoder input)", 2 * decoder.in_dim()),
                format!("{}", encoder.out_dim()),
            ));
        }
        // Non-compressive by default: the sampled latent keeps the z_y dim.
        if decoder.in_dim() != encoder.in_dim() {
            return Err(Error::InvalidArgument(format!(
                "non-compressive head: expected latent dim {} to match input dim {}",
                decoder.in_dim(),
                encoder.in_dim()
            )));
        }
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        Ok(VariationalLatentMap {
            encoder,
            decoder,
            sigma,
        })
    }

    /// Dense default: encoder `r_y -> hidden -> 2 r_y`, decoder
    /// `r_y -> hidden -> r_x`, ReLU hidden layers.
    pub fn mlp_default(
        r_y: usize,
        r_x: usize,
        hidden: usize,
        sigma: f64,
        rng: &mut RngState,
    ) -> Result<VariationalLatentMap> {
        use crate::nn::{Activation, LayerSpec};
        let encoder = MlpNet::init(
            vec![
                LayerSpec::new(r_y, hidden, Activation::Relu),
                LayerSpec::new(hidden, 2 * r_y, Activation::Identity),
            ],
            rng,
        )?;
        let decoder = MlpNet::init(
            vec![
                LayerSpec::new(r_y, hidden, Activation::Relu),
                LayerSpec::new(hidden, r_x, Activation::Identity),
            ],
            rng,
        )?;
        VariationalLatentMap::new(encoder, decoder, sigma)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn collect_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.append_params(&mut out);
        self.decoder.append_params(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.encoder.param_count();
        self.encoder.load_params(&flat[..ne])?;
        self.decoder.load_params(&flat[ne..])?;
        Ok(())
    }
}

/// Non-automorphic ELBO loss for the latent map over latent pairs:
/// `mse(d(sample), z_x) / (2 sigma) + KL(head || N(0, I))`, batch mean.
pub fn latent_map_loss(
    map: &VariationalLatentMap,
    z_y: &Tensor,
    z_x: &Tensor,
    rng: &mut RngState,
) -> Result<(f64, Vec<f64>)> {
    if z_y.rows() != z_x.rows() {
        return Err(Error::shape(
            format!("{} z_y rows", z_y.rows()),
            format!("{} z_x rows", z_x.rows()),
        ));
    }
    let b = z_y.rows() as f64;
    let dim = map.decoder.in_dim();
    let (h, enc_tape) = map.encoder.forward(z_y)?;
    let (mu, ls) = split_halves(&h, dim);
    let eps = draw_eps(rng, z_y.rows(), dim);
    let std = ls.map(f64::exp);
    let s = mu.add(&std.hadamard(&eps));
    let (out, dec_tape) = map.decoder.forward(&s)?;

    let diff = out.sub(z_x);
    let recon = diff.norm().powi(2) / (out.len() as f64 * 2.0 * map.sigma);
    let kl = kl_batch(&mu, &ls) / b;
    let loss = recon + kl;

    let d_out = diff.scale(1.0 / (out.len() as f64 * map.sigma));
    let dec_grads = map.decoder.backward(&dec_tape, &d_out)?;
    let d_s = &dec_grads.d_input;
    let d_mu = d_s.add(&mu.scale(1.0 / b));
    let d_ls = d_s
        .hadamard(&eps)
        .hadamard(&std)
        .add(&ls.map(|l| (2.0 * l).exp() - 1.0).scale(1.0 / b));
    let enc_grads = map.encoder.backward(&enc_tape, &concat_halves(&d_mu, &d_ls))?;

    let mut flat = Vec::with_capacity(map.param_count());
    for l in 0..map.encoder.specs().len() {
        flat.extend_from_slice(enc_grads.d_weights[l].data());
        flat.extend_from_slice(enc_grads.d_biases[l].data());
    }
    for l in 0..map.decoder.specs().len() {
        flat.extend_from_slice(dec_grads.d_weights[l].data());
        flat.extend_from_slice(dec_grads.d_biases[l].data());
    }
    Ok((loss, flat))
}

/// Trains the stochastic latent map on encoded pairs produced by frozen
/// autoencoders. Deterministic under the seed; diverging loss fails with
/// the epoch index.
pub fn train_variational_latent_map(
    mut map: VariationalLatentMap,
    z_y: &Tensor,
    z_x: &Tensor,
    cfg: &SgdConfig,
) -> Result<(VariationalLatentMap, Vec<f64>)> {
    let n = z_y.rows();
    let mut params = Tensor::vector(map.collect_params());
    let mut adam = AdamState::new(&[params.len()], cfg.lr);
    let mut rng = RngState::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.next_below(i + 1));
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let by = gather_rows(z_y, chunk);
            let bx = gather_rows(z_x, chunk);
            let (loss, grads) = latent_map_loss(&map, &by, &bx, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let (next, st) = adam_step(&params, &Tensor::vector(grads), &adam)?;
            params = next;
            adam = st;
            map.set_params(params.data())?;
            total += loss;
            batches += 1;
        }
        losses.push(total / batches.max(1) as f64);
    }
    Ok((map, losses))
}

/// `n` stochastic draws through the latent map: sample the head, decode.
pub fn latent_map_sample(
    map: &VariationalLatentMap,
    z_y: &Tensor,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let dim = map.decoder.in_dim();
    let row = z_y.reshape(&[1, map.encoder.in_dim()])?;
    let (h, _) = map.encoder.forward(&row)?;
    let (mu, ls) = split_halves(&h, dim);
    let g = GaussianLatent::new(
        Tensor::vector(mu.row(0).to_vec()),
        Tensor::vector(ls.row(0).to_vec()),
    )?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = crate::nn::reparameterize(&g, rng);
        let (zx, _) = map.decoder.forward(&s.reshape(&[1, dim])?)?;
        out.push(Tensor::vector(zx.row(0).to_vec()));
    }
    Ok(out)
}

/// Warm-start choices a VPAE offers for latent-space inversion.
#[derive(Debug, Clone, Copy)]
pub enum VpaeWarmStart {
    /// The mapped posterior mean (deterministic).
    MappedMean,
    /// A single reparameterized draw from the mapped posterior.
    Sample,
    /// The mean of `n` reparameterized draws.
    SampleMean { n: usize },
}

pub fn vpae_warm_start(
    vpae: &VpaeModel,
    y: &Tensor,
    kind: VpaeWarmStart,
    rng: &mut RngState,
) -> Result<Tensor> {
    let g = vpae.map_inverse_latent(y)?;
    let z = match kind {
        VpaeWarmStart::MappedMean => g.mu.clone(),
        VpaeWarmStart::Sample => crate::nn::reparameterize(&g, rng),
        VpaeWarmStart::SampleMean { n } => {
            let mut acc = Tensor::zeros(&[g.dim()]);
            for _ in 0..n.max(1) {
                acc.axpy(1.0 / n.max(1) as f64, &crate::nn::reparameterize(&g, rng));
            }
            acc
        }
    };
    z.reshape(&[1, vpae.ae_x.latent_dim])
}
