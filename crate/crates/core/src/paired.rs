//! The paired-autoencoder model: two autoencoders joined by trainable latent
//! maps, the joint training objective, and the direct surrogate estimates.

use crate::error::{Error, Result};
use crate::linear::{LinearAe, LinearMaps};
use crate::nn::{Activation, LayerSpec, MlpGrads, MlpNet, Tape};
use crate::optim::{adam_step, AdamState};
use crate::rng::RngState;
use crate::tensor::{mse, Tensor};

/// One piece of a paired model: an encoder, decoder, or latent map.
#[derive(Debug, Clone)]
pub enum Block {
    /// Pass-through; requires matching latent dimensions.
    Identity { dim: usize },
    /// Dense matrix (`out x in`, no bias). Closed-form pieces are frozen.
    Matrix { weight: Tensor, trainable: bool },
    Mlp(MlpNet),
}

/// Forward cache for one block, consumed by `backward`.
#[derive(Debug, Clone)]
pub enum BlockTape {
    Identity,
    Matrix { input: Tensor },
    Mlp(Tape),
}

#[derive(Debug, Clone)]
pub enum BlockGrads {
    None,
    Matrix(Tensor),
    Mlp(MlpGrads),
}

impl Block {
    pub fn matrix(weight: Tensor, trainable: bool) -> Block {
        assert_eq!(weight.shape().len(), 2);
        Block::Matrix { weight, trainable }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Block::Identity { dim } => *dim,
            Block::Matrix { weight, .. } => weight.cols(),
            Block::Mlp(net) => net.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Block::Identity { dim } => *dim,
            Block::Matrix { weight, .. } => weight.rows(),
            Block::Mlp(net) => net.out_dim(),
        }
    }

    /// Explicit matrix view, if this block is linear.
    pub fn as_matrix(&self) -> Option<Tensor> {
        match self {
            Block::Identity { dim } => Some(Tensor::identity(*dim)),
            Block::Matrix { weight, .. } => Some(weight.clone()),
            Block::Mlp(_) => None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockTape)> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(Error::shape(
                format!("[B, {}]", self.in_dim()),
                format!("{:?}", x.shape()),
            ));
        }
        match self {
            Block::Identity { .. } => Ok((x.clone(), BlockTape::Identity)),
            Block::Matrix { weight, .. } => Ok((
                x.matmul(&weight.transpose()),
                BlockTape::Matrix { input: x.clone() },
            )),
            Block::Mlp(net) => {
                let (y, tape) = net.forward(x)?;
                Ok((y, BlockTape::Mlp(tape)))
            }
        }
    }

    pub fn backward(&self, tape: &BlockTape, out_grad: &Tensor) -> Result<(Tensor, BlockGrads)> {
        match (self, tape) {
            (Block::Identity { .. }, BlockTape::Identity) => {
                Ok((out_grad.clone(), BlockGrads::None))
            }
            (Block::Matrix { weight, .. }, BlockTape::Matrix { input }) => {
                let d_w = out_grad.transpose().matmul(input);
                let d_in = out_grad.matmul(weight);
                Ok((d_in, BlockGrads::Matrix(d_w)))
            }
            (Block::Mlp(net), BlockTape::Mlp(t)) => {
                let g = net.backward(t, out_grad)?;
                let d_in = g.d_input.clone();
                Ok((d_in, BlockGrads::Mlp(g)))
            }
            _ => Err(Error::InvalidArgument("tape does not match block kind".into())),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Identity { .. } => 0,
            Block::Matrix { weight, trainable } => {
                if *trainable {
                    weight.len()
                } else {
                    0
                }
            }
            Block::Mlp(net) => net.param_count(),
        }
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        match self {
            Block::Identity { .. } => {}
            Block::Matrix { weight, trainable } => {
                if *trainable {
                    out.extend_from_slice(weight.data());
                }
            }
            Block::Mlp(net) => net.append_params(out),
        }
    }

    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Block::Identity { .. } => Ok(()),
            Block::Matrix { weight, trainable } => {
                if *trainable {
                    weight.data_mut().copy_from_slice(flat);
                }
                Ok(())
            }
            Block::Mlp(net) => net.load_params(flat),
        }
    }

    /// Adds this block's gradient contribution into a flat slice laid out
    /// like `append_params`.
    pub fn accumulate_grads(&self, grads: &BlockGrads, out: &mut [f64]) {
        match (self, grads) {
            (Block::Identity { .. }, _) | (_, BlockGrads::None) => {}
            (Block::Matrix { trainable, .. }, BlockGrads::Matrix(dw)) => {
                if *trainable {
                    for (o, &g) in out.iter_mut().zip(dw.data()) {
                        *o += g;
                    }
                }
            }
            (Block::Mlp(net), BlockGrads::Mlp(g)) => {
                let mut off = 0;
                for l in 0..net.specs().len() {
                    for &v in g.d_weights[l].data() {
                        out[off] += v;
                        off += 1;
                    }
                    for &v in g.d_biases[l].data() {
                        out[off] += v;
                        off += 1;
                    }
                }
            }
            _ => unreachable!("gradient kind always matches block kind"),
        }
    }
}

/// Which parameter groups a training pass updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    AutoencodersOnly,
    MapsOnly,
}

/// Selectable joint objectives: the two surrogate terms, the two pure latent
/// terms, or the full four-term sum (default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    FullMappings,
    LatentMappings,
    Combined,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub alpha_m: f64,
    pub alpha_m_dagger: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
    /// Train the autoencoders first (map terms off), then only the maps.
    pub two_stage: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            alpha_x: 1.0,
            alpha_y: 1.0,
            alpha_m: 1.0,
            alpha_m_dagger: 1.0,
            lr: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            loss_variant: LossVariant::Combined,
            two_stage: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_x, self.alpha_y, self.alpha_m, self.alpha_m_dagger];
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument("at least one loss weight must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Aligned `(x, y)` training pairs, one row per sample.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub xs: Tensor,
    pub ys: Tensor,
}

impl PairSet {
    pub fn new(xs: Tensor, ys: Tensor) -> Result<PairSet> {
        if xs.rows() != ys.rows() {
            return Err(Error::shape(
                format!("{} x-rows", xs.rows()),
                format!("{} y-rows", ys.rows()),
            ));
        }
        if xs.rows() == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        Ok(PairSet { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Paired autoencoder: `e_x`, `d_x`, `e_y`, `d_y` joined by latent maps
/// `M: Z_x -> Z_y` and `M+: Z_y -> Z_x`.
#[derive(Debug, Clone)]
pub struct PairedModel {
    pub e_x: Block,
    pub d_x: Block,
    pub e_y: Block,
    pub d_y: Block,
    pub map_fwd: Block,
    pub map_inv: Block,
    pub r_x: usize,
    pub r_y: usize,
}

impl PairedModel {
    pub fn new(
        e_x: Block,
        d_x: Block,
        e_y: Block,
        d_y: Block,
        map_fwd: Block,
        map_inv: Block,
    ) -> Result<PairedModel> {
        let r_x = e_x.out_dim();
        let r_y = e_y.out_dim();
        let checks = [
            (d_x.in_dim(), r_x, "d_x input vs r_x"),
            (map_fwd.in_dim(), r_x, "M input vs r_x"),
            (map_fwd.out_dim(), r_y, "M output vs r_y"),
            (map_inv.in_dim(), r_y, "M+ input vs r_y"),
            (map_inv.out_dim(), r_x, "M+ output vs r_x"),
            (d_y.in_dim(), r_y, "d_y input vs r_y"),
        ];
        for (got, want, what) in checks {
            if got != want {
                return Err(Error::shape(format!("{what}: {want}"), format!("{got}")));
            }
        }
        if matches!(map_fwd, Block::Identity { .. }) && r_x != r_y {
            return Err(Error::InvalidArgument(
                "identity latent maps require r_x == r_y".into(),
            ));
        }
        Ok(PairedModel {
            e_x,
            d_x,
            e_y,
            d_y,
            map_fwd,
            map_inv,
            r_x,
            r_y,
        })
    }

    /// Default dense architecture for flattened images: encoder
    /// `in -> widths... -> r` with ReLU hidden layers, mirrored decoder with
    /// a sigmoid output, and single trainable matrices as latent maps.
    pub fn mlp_default(
        n_x: usize,
        n_y: usize,
        r_x: usize,
        r_y: usize,
        widths: &[usize],
        identity_maps: bool,
        rng: &mut RngState,
    ) -> Result<PairedModel> {
        let enc_specs = |input: usize, r: usize| {
            let mut specs = Vec::new();
            let mut prev = input;
            for &w in widths {
                specs.push(LayerSpec::new(prev, w, Activation::Relu));
                prev = w;
            }
            specs.push(LayerSpec::new(prev, r, Activation::Identity));
            specs
        };
        let dec_specs = |r: usize, output: usize| {
            let mut specs = Vec::new();
            let mut prev = r;
            for &w in widths.iter().rev() {
                specs.push(LayerSpec::new(prev, w, Activation::Relu));
                prev = w;
            }
            specs.push(LayerSpec::new(prev, output, Activation::Sigmoid));
            specs
        };
        let e_x = Block::Mlp(MlpNet::init(enc_specs(n_x, r_x), rng)?);
        let d_x = Block::Mlp(MlpNet::init(dec_specs(r_x, n_x), rng)?);
        let e_y = Block::Mlp(MlpNet::init(enc_specs(n_y, r_y), rng)?);
        let d_y = Block::Mlp(MlpNet::init(dec_specs(r_y, n_y), rng)?);
        let (map_fwd, map_inv) = if identity_maps {
            (Block::Identity { dim: r_x }, Block::Identity { dim: r_y })
        } else {
            let bound_f = (6.0 / (r_x + r_y) as f64).sqrt();
            let mut wf = Tensor::zeros(&[r_y, r_x]);
            for v in wf.data_mut() {
                *v = rng.uniform_in(-bound_f, bound_f);
            }
            let mut wi = Tensor::zeros(&[r_x, r_y]);
            for v in wi.data_mut() {
                *v = rng.uniform_in(-bound_f, bound_f);
            }
            (Block::matrix(wf, true), Block::matrix(wi, true))
        };
        PairedModel::new(e_x, d_x, e_y, d_y, map_fwd, map_inv)
    }

    /// All-linear model from closed-form pieces (frozen).
    pub fn from_linear(ae_x: &LinearAe, ae_y: &LinearAe, maps: &LinearMaps) -> Result<PairedModel> {
        PairedModel::new(
            Block::matrix(ae_x.encoder.clone(), false),
            Block::matrix(ae_x.decoder.clone(), false),
            Block::matrix(ae_y.encoder.clone(), false),
            Block::matrix(ae_y.decoder.clone(), false),
            Block::matrix(maps.forward.clone(), false),
            Block::matrix(maps.inverse.clone(), false),
        )
    }

    pub fn x_dim(&self) -> usize {
        self.e_x.in_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.e_y.in_dim()
    }

    pub fn encode_x(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.e_x.forward(x)?.0)
    }

    pub fn decode_x(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.d_x.forward(z)?.0)
    }

    pub fn encode_y(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.e_y.forward(y)?.0)
    }

    pub fn decode_y(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.d_y.forward(z)?.0)
    }

    pub fn latent_forward(&self, z_x: &Tensor) -> Result<Tensor> {
        Ok(self.map_fwd.forward(z_x)?.0)
    }

    pub fn latent_inverse(&self, z_y: &Tensor) -> Result<Tensor> {
        Ok(self.map_inv.forward(z_y)?.0)
    }

    pub fn decoder_x_matrix(&self) -> Option<Tensor> {
        self.d_x.as_matrix()
    }

    pub fn encoder_y_matrix(&self) -> Option<Tensor> {
        self.e_y.as_matrix()
    }

    pub fn map_inv_matrix(&self) -> Option<Tensor> {
        self.map_inv.as_matrix()
    }

    /// Direct (one-shot, likelihood-free) estimate `x = d_x(M+(e_y(y)))`.
    pub fn direct_estimate(&self, y: &Tensor) -> Result<Tensor> {
        self.decode_x(&self.latent_inverse(&self.encode_y(y)?)?)
    }

    /// Surrogate forward prediction `y = d_y(M(e_x(x)))`.
    pub fn surrogate_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.decode_y(&self.latent_forward(&self.encode_x(x)?)?)
    }

    fn blocks(&self) -> [&Block; 6] {
        [
            &self.e_x,
            &self.d_x,
            &self.e_y,
            &self.d_y,
            &self.map_fwd,
            &self.map_inv,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Block; 6] {
        [
            &mut self.e_x,
            &mut self.d_x,
            &mut self.e_y,
            &mut self.d_y,
            &mut self.map_fwd,
            &mut self.map_inv,
        ]
    }

    fn group_mask(group: ParamGroup) -> [bool; 6] {
        match group {
            ParamGroup::All => [true; 6],
            ParamGroup::AutoencodersOnly => [true, true, true, true, false, false],
            ParamGroup::MapsOnly => [false, false, false, false, true, true],
        }
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        let mask = Self::group_mask(group);
        self.blocks()
            .iter()
            .zip(mask)
            .filter(|(_, m)| *m)
            .map(|(b, _)| b.param_count())
            .sum()
    }

    pub fn collect_params(&self, group: ParamGroup) -> Vec<f64> {
        let mask = Self::group_mask(group);
        let mut out = Vec::with_capacity(self.param_count(group));
        for (block, m) in self.blocks().iter().zip(mask) {
            if m {
                block.append_params(&mut out);
            }
        }
        out
    }

    pub fn set_params(&mut self, group: ParamGroup, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count(group) {
            return Err(Error::shape(
                format!("{} parameters", self.param_count(group)),
                format!("{}", flat.len()),
            ));
        }
        let mask = Self::group_mask(group);
        let mut off = 0;
        for (block, m) in self.blocks_mut().into_iter().zip(mask) {
            if m {
                let n = block.param_count();
                block.load_params(&flat[off..off + n])?;
                off += n;
            }
        }
        Ok(())
    }
}

/// Joint objective over a batch. With the combined variant:
/// `alpha_x mse(d_x(e_x(x)), x) + alpha_y mse(d_y(e_y(y)), y)
///  + alpha_M mse(d_y(M(e_x(x))), y) + alpha_M+ mse(d_x(M+(e_y(y))), x)`.
/// Returns the loss and the gradient for the selected parameter group.
pub fn paired_loss(
    model: &PairedModel,
    batch: &PairSet,
    cfg: &TrainConfig,
    group: ParamGroup,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let xs = &batch.xs;
    let ys = &batch.ys;
    if xs.cols() != model.x_dim() || ys.cols() != model.y_dim() {
        return Err(Error::shape(
            format!("x cols {}, y cols {}", model.x_dim(), model.y_dim()),
            format!("x cols {}, y cols {}", xs.cols(), ys.cols()),
        ));
    }

    // Shared encoder passes.
    let (z_x, tape_ex) = model.e_x.forward(xs)?;
    let (z_y, tape_ey) = model.e_y.forward(ys)?;

    let mask = PairedModel::group_mask(group);
    let mut grads = vec![0.0; model.param_count(group)];
    let offsets = {
        let mut off = Vec::with_capacity(6);
        let mut acc = 0;
        for (block, m) in model.blocks().iter().zip(mask) {
            off.push(acc);
            if m {
                acc += block.param_count();
            }
        }
        off
    };
    let add = |idx: usize, block: &Block, g: &BlockGrads, grads: &mut Vec<f64>| {
        if mask[idx] {
            let start = offsets[idx];
            let end = start + block.param_count();
            block.accumulate_grads(g, &mut grads[start..end]);
        }
    };

    let mut loss = 0.0;
    let mut d_zx = Tensor::zeros(z_x.shape());
    let mut d_zy = Tensor::zeros(z_y.shape());

    let use_ae_terms = matches!(cfg.loss_variant, LossVariant::Combined);
    let use_full_maps = matches!(
        cfg.loss_variant,
        LossVariant::Combined | LossVariant::FullMappings
    );
    let use_latent_maps = matches!(cfg.loss_variant, LossVariant::LatentMappings);

    if use_ae_terms || use_latent_maps {
        if cfg.alpha_x > 0.0 {
            let (xr, tape_dx) = model.d_x.forward(&z_x)?;
            loss += cfg.alpha_x * mse(&xr, xs)?;
            let g_out = xr.sub(xs).scale(2.0 * cfg.alpha_x / xr.len() as f64);
            let (g_in, g_dx) = model.d_x.backward(&tape_dx, &g_out)?;
            add(1, &model.d_x, &g_dx, &mut grads);
            d_zx.axpy(1.0, &g_in);
        }
        if cfg.alpha_y > 0.0 {
            let (yr, tape_dy) = model.d_y.forward(&z_y)?;
            loss += cfg.alpha_y * mse(&yr, ys)?;
            let g_out = yr.sub(ys).scale(2.0 * cfg.alpha_y / yr.len() as f64);
            let (g_in, g_dy) = model.d_y.backward(&tape_dy, &g_out)?;
            add(3, &model.d_y, &g_dy, &mut grads);
            d_zy.axpy(1.0, &g_in);
        }
    }

    if use_full_maps {
        if cfg.alpha_m > 0.0 {
            let (z_map, tape_m) = model.map_fwd.forward(&z_x)?;
            let (y_hat, tape_dy) = model.d_y.forward(&z_map)?;
            loss += cfg.alpha_m * mse(&y_hat, ys)?;
            let g_out = y_hat.sub(ys).scale(2.0 * cfg.alpha_m / y_hat.len() as f64);
            let (g_zmap, g_dy) = model.d_y.backward(&tape_dy, &g_out)?;
            add(3, &model.d_y, &g_dy, &mut grads);
            let (g_in, g_m) = model.map_fwd.backward(&tape_m, &g_zmap)?;
            add(4, &model.map_fwd, &g_m, &mut grads);
            d_zx.axpy(1.0, &g_in);
        }
        if cfg.alpha_m_dagger > 0.0 {
            let (z_map, tape_mi) = model.map_inv.forward(&z_y)?;
            let (x_hat, tape_dx) = model.d_x.forward(&z_map)?;
            loss += cfg.alpha_m_dagger * mse(&x_hat, xs)?;
            let g_out = x_hat
                .sub(xs)
                .scale(2.0 * cfg.alpha_m_dagger / x_hat.len() as f64);
            let (g_zmap, g_dx) = model.d_x.backward(&tape_dx, &g_out)?;
            add(1, &model.d_x, &g_dx, &mut grads);
            let (g_in, g_mi) = model.map_inv.backward(&tape_mi, &g_zmap)?;
            add(5, &model.map_inv, &g_mi, &mut grads);
            d_zy.axpy(1.0, &g_in);
        }
    }

    if use_latent_maps {
        if cfg.alpha_m > 0.0 {
            let (z_map, tape_m) = model.map_fwd.forward(&z_x)?;
            loss += cfg.alpha_m * mse(&z_map, &z_y)?;
            let g_out = z_map.sub(&z_y).scale(2.0 * cfg.alpha_m / z_map.len() as f64);
            let (g_in, g_m) = model.map_fwd.backward(&tape_m, &g_out)?;
            add(4, &model.map_fwd, &g_m, &mut grads);
            d_zx.axpy(1.0, &g_in);
            d_zy.axpy(-1.0, &g_out);
        }
        if cfg.alpha_m_dagger > 0.0 {
            let (z_map, tape_mi) = model.map_inv.forward(&z_y)?;
            loss += cfg.alpha_m_dagger * mse(&z_x, &z_map)?;
            let g_out = z_map
                .sub(&z_x)
                .scale(2.0 * cfg.alpha_m_dagger / z_map.len() as f64);
            let (g_in, g_mi) = model.map_inv.backward(&tape_mi, &g_out)?;
            add(5, &model.map_inv, &g_mi, &mut grads);
            d_zy.axpy(1.0, &g_in);
            d_zx.axpy(-1.0, &g_out);
        }
    }

    if d_zx.max_abs() > 0.0 {
        let (_, g_ex) = model.e_x.backward(&tape_ex, &d_zx)?;
        add(0, &model.e_x, &g_ex, &mut grads);
    }
    if d_zy.max_abs() > 0.0 {
        let (_, g_ey) = model.e_y.backward(&tape_ey, &d_zy)?;
        add(2, &model.e_y, &g_ey, &mut grads);
    }

    Ok((loss, grads))
}

/// Mean-loss record per epoch.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// ADAM minimization of the joint objective; deterministic under the seed.
/// Divergence (non-finite loss) fails explicitly with the epoch index.
pub fn train_paired(
    mut model: PairedModel,
    data: &PairSet,
    cfg: &TrainConfig,
) -> Result<(PairedModel, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog {
        epoch_losses: Vec::new(),
    };
    if cfg.two_stage {
        let mut stage1 = cfg.clone();
        stage1.alpha_m = 0.0;
        stage1.alpha_m_dagger = 0.0;
        stage1.loss_variant = LossVariant::Combined;
        stage1.two_stage = false;
        run_stage(
            &mut model,
            data,
            &stage1,
            ParamGroup::AutoencodersOnly,
            &mut log,
            0,
        )?;
        let mut stage2 = cfg.clone();
        stage2.two_stage = false;
        run_stage(
            &mut model,
            data,
            &stage2,
            ParamGroup::MapsOnly,
            &mut log,
            cfg.epochs,
        )?;
    } else {
        run_stage(&mut model, data, cfg, ParamGroup::All, &mut log, 0)?;
    }
    Ok((model, log))
}

fn run_stage(
    model: &mut PairedModel,
    data: &PairSet,
    cfg: &TrainConfig,
    group: ParamGroup,
    log: &mut TrainLog,
    epoch_offset: usize,
) -> Result<()> {
    let n = data.len();
    let pcount = model.param_count(group);
    if pcount == 0 {
        return Ok(());
    }
    let mut params = Tensor::vector(model.collect_params(group));
    let mut adam = AdamState::new(&[pcount], cfg.lr);
    let mut rng = RngState::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.next_below(i + 1));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xs = gather_rows(&data.xs, chunk);
            let ys = gather_rows(&data.ys, chunk);
            let batch = PairSet { xs, ys };
            let (loss, grads) = paired_loss(model, &batch, cfg, group)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch_offset + epoch,
                });
            }
            let g = Tensor::vector(grads);
            let (next, st) = adam_step(&params, &g, &adam)?;
            params = next;
            adam = st;
            model.set_params(group, params.data())?;
            epoch_loss += loss;
            batches += 1;
        }
        log.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(())
}

pub(crate) fn gather_rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let c = m.cols();
    let mut out = Tensor::zeros(&[idx.len(), c]);
    for (dst, &src) in idx.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_grad;
    use crate::rng::gaussian_sample;

    fn identity_model(n: usize) -> PairedModel {
        PairedModel::new(
            Block::matrix(Tensor::identity(n), false),
            Block::matrix(Tensor::identity(n), false),
            Block::matrix(Tensor::identity(n), false),
            Block::matrix(Tensor::identity(n), false),
            Block::Identity { dim: n },
            Block::Identity { dim: n },
        )
        .unwrap()
    }

    fn small_mlp_model(seed: u64) -> PairedModel {
        let mut rng = RngState::new(seed);
        PairedModel::mlp_default(5, 4, 2, 3, &[6], false, &mut rng).unwrap()
    }

    fn small_batch(seed: u64, n_x: usize, n_y: usize, b: usize) -> PairSet {
        let mut rng = RngState::new(seed);
        PairSet::new(
            gaussian_sample(&mut rng, &[b, n_x], 0.2, 0.4).unwrap(),
            gaussian_sample(&mut rng, &[b, n_y], 0.3, 0.4).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_model_has_zero_loss_on_equal_pairs() {
        let model = identity_model(4);
        let mut rng = RngState::new(60);
        let x = gaussian_sample(&mut rng, &[3, 4], 0.0, 1.0).unwrap();
        let batch = PairSet::new(x.clone(), x).unwrap();
        let cfg = TrainConfig::default();
        let (loss, _) = paired_loss(&model, &batch, &cfg, ParamGroup::All).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn term_isolation() {
        // Zeroing three weights leaves exactly the remaining single term.
        let model = small_mlp_model(61);
        let batch = small_batch(62, 5, 4, 7);
        let base = TrainConfig::default();
        let term = |ax: f64, ay: f64, am: f64, ami: f64| {
            let cfg = TrainConfig {
                alpha_x: ax,
                alpha_y: ay,
                alpha_m: am,
                alpha_m_dagger: ami,
                ..base.clone()
            };
            paired_loss(&model, &batch, &cfg, ParamGroup::All).unwrap().0
        };
        let full = term(1.0, 1.0, 1.0, 1.0);
        let parts = term(1.0, 0.0, 0.0, 0.0)
            + term(0.0, 1.0, 0.0, 0.0)
            + term(0.0, 0.0, 1.0, 0.0)
            + term(0.0, 0.0, 0.0, 1.0);
        assert!((full - parts).abs() < 1e-12);
    }

    #[test]
    fn perfect_x_autoencoder_isolated_term_is_zero() {
        let model = identity_model(3);
        let mut rng = RngState::new(63);
        let x = gaussian_sample(&mut rng, &[4, 3], 0.0, 1.0).unwrap();
        let y = gaussian_sample(&mut rng, &[4, 3], 0.0, 1.0).unwrap();
        let batch = PairSet::new(x, y).unwrap();
        let cfg = TrainConfig {
            alpha_y: 0.0,
            alpha_m: 0.0,
            alpha_m_dagger: 0.0,
            ..TrainConfig::default()
        };
        let (loss, _) = paired_loss(&model, &batch, &cfg, ParamGroup::All).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    fn check_gradient(cfg: &TrainConfig, seed: u64) {
        let model = small_mlp_model(seed);
        let batch = small_batch(seed + 1, 5, 4, 3);
        let theta = Tensor::vector(model.collect_params(ParamGroup::All));
        let f = |p: &Tensor| {
            let mut m = model.clone();
            m.set_params(ParamGroup::All, p.data()).unwrap();
            paired_loss(&m, &batch, cfg, ParamGroup::All).unwrap().0
        };
        let fd = finite_diff_grad(&f, &theta, 1e-5);
        let (_, analytic) = paired_loss(&model, &batch, cfg, ParamGroup::All).unwrap();
        let mut worst = 0.0_f64;
        for (a, g) in analytic.iter().zip(fd.data()) {
            let rel = (a - g).abs() / a.abs().max(g.abs()).max(1.0);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_combined() {
        check_gradient(&TrainConfig::default(), 64);
    }

    #[test]
    fn gradients_match_finite_differences_latent_variant() {
        check_gradient(
            &TrainConfig {
                loss_variant: LossVariant::LatentMappings,
                ..TrainConfig::default()
            },
            65,
        );
    }

    #[test]
    fn gradients_match_finite_differences_full_mappings_variant() {
        check_gradient(
            &TrainConfig {
                loss_variant: LossVariant::FullMappings,
                ..TrainConfig::default()
            },
            66,
        );
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let model = small_mlp_model(67);
        let before = model.collect_params(ParamGroup::All);
        let data = small_batch(68, 5, 4, 12);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (trained, _) = train_paired(model, &data, &cfg).unwrap();
        assert_eq!(before, trained.collect_params(ParamGroup::All));
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = small_batch(69, 5, 4, 24);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let model = small_mlp_model(70);
            train_paired(model, &data, &cfg).unwrap().0.collect_params(ParamGroup::All)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss() {
        let data = small_batch(71, 5, 4, 64);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let model = small_mlp_model(72);
        let (_, log) = train_paired(model, &data, &cfg).unwrap();
        let first = log.epoch_losses[0];
        let last = *log.epoch_losses.last().unwrap();
        assert!(last <= first, "first {first}, last {last}");
    }

    #[test]
    fn direct_and_surrogate_identity() {
        let model = identity_model(4);
        let mut rng = RngState::new(73);
        let y = gaussian_sample(&mut rng, &[2, 4], 0.0, 1.0).unwrap();
        assert_eq!(model.direct_estimate(&y).unwrap(), y);
        assert_eq!(model.surrogate_forward(&y).unwrap(), y);
    }

    #[test]
    fn direct_estimate_matches_matrix_arithmetic() {
        let mut rng = RngState::new(74);
        let e = gaussian_sample(&mut rng, &[2, 5], 0.0, 1.0).unwrap();
        let d = gaussian_sample(&mut rng, &[5, 2], 0.0, 1.0).unwrap();
        let ey = gaussian_sample(&mut rng, &[3, 4], 0.0, 1.0).unwrap();
        let dy = gaussian_sample(&mut rng, &[4, 3], 0.0, 1.0).unwrap();
        let m = gaussian_sample(&mut rng, &[3, 2], 0.0, 1.0).unwrap();
        let mi = gaussian_sample(&mut rng, &[2, 3], 0.0, 1.0).unwrap();
        let model = PairedModel::new(
            Block::matrix(e.clone(), false),
            Block::matrix(d.clone(), false),
            Block::matrix(ey.clone(), false),
            Block::matrix(dy.clone(), false),
            Block::matrix(m.clone(), false),
            Block::matrix(mi.clone(), false),
        )
        .unwrap();
        let y = gaussian_sample(&mut rng, &[1, 4], 0.0, 1.0).unwrap();
        let got = model.direct_estimate(&y).unwrap();
        let want = d
            .matmul(&mi)
            .matmul(&ey)
            .matvec(&Tensor::vector(y.row(0).to_vec()));
        for i in 0..5 {
            assert!((got.at(0, i) - want.data()[i]).abs() < 1e-10);
        }
        let x = gaussian_sample(&mut rng, &[1, 5], 0.0, 1.0).unwrap();
        let got_f = model.surrogate_forward(&x).unwrap();
        let want_f = dy
            .matmul(&m)
            .matmul(&e)
            .matvec(&Tensor::vector(x.row(0).to_vec()));
        for i in 0..4 {
            assert!((got_f.at(0, i) - want_f.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn estimates_independent_of_batch_context() {
        let model = small_mlp_model(75);
        let mut rng = RngState::new(76);
        let ys = gaussian_sample(&mut rng, &[6, 4], 0.0, 1.0).unwrap();
        let full = model.direct_estimate(&ys).unwrap();
        for i in 0..6 {
            let single = model.direct_estimate(&ys.row_matrix(i)).unwrap();
            for j in 0..5 {
                assert_eq!(full.at(i, j), single.at(0, j));
            }
        }
    }

    #[test]
    fn identity_maps_equal_explicit_identity_matrices() {
        let mut rng = RngState::new(77);
        let base = PairedModel::mlp_default(5, 5, 3, 3, &[6], true, &mut rng).unwrap();
        let explicit = PairedModel::new(
            base.e_x.clone(),
            base.d_x.clone(),
            base.e_y.clone(),
            base.d_y.clone(),
            Block::matrix(Tensor::identity(3), false),
            Block::matrix(Tensor::identity(3), false),
        )
        .unwrap();
        let batch = small_batch(78, 5, 5, 9);
        let cfg = TrainConfig::default();
        let (a, _) = paired_loss(&base, &batch, &cfg, ParamGroup::All).unwrap();
        let (b, _) = paired_loss(&explicit, &batch, &cfg, ParamGroup::All).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let cfg = TrainConfig {
            alpha_x: 0.0,
            alpha_y: 0.0,
            alpha_m: 0.0,
            alpha_m_dagger: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = small_mlp_model(79);
        let batch = small_batch(80, 4, 4, 3);
        let cfg = TrainConfig::default();
        assert!(paired_loss(&model, &batch, &cfg, ParamGroup::All).is_err());
    }
}
