//! Command implementations behind the `pae` binary.
//!
//! Exit-code contract: 0 success, 2 usage/config problems, 3 numerical
//! failures (training divergence, non-finite objectives, SVD breakdown).

use crate::checkpoint::{self, SavedModel};
use crate::config::{DataSource, ModelKind, RunConfig};
use pae_core::data::{read_idx, write_idx_images, IdxData, ImageSet};
use pae_core::inversion::{lsi_with_start, ForwardOp, LsiConfig};
use pae_core::linear::{
    default_ridge, fit_latent_maps_lstsq, fit_linear_ae, second_moment_factor,
};
use pae_core::metrics::{export_report, fit_baseline, ood_score, recon_metrics, rel_err, ssim};
use pae_core::paired::{train_paired, Block, PairSet, PairedModel, ParamGroup, TrainConfig};
use pae_core::variational::{
    latent_map_sample, pixel_stats, train_variational_latent_map, train_vpae,
    vpae_sample_inference, SgdConfig, VariationalLatentMap, VpaeModel,
};
use pae_core::{Error as CoreError, RngState, Tensor};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CmdError {
    /// Configuration, argument, or input-file problems (exit 2).
    Usage(String),
    /// Numerical failures during optimization or decomposition (exit 3).
    Numeric(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Numeric(m) => m,
        }
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> CmdError {
        match e {
            CoreError::Diverged { .. }
            | CoreError::NonFiniteObjective { .. }
            | CoreError::SvdNoConvergence { .. }
            | CoreError::EigNoConvergence { .. } => CmdError::Numeric(e.to_string()),
            other => CmdError::Usage(other.to_string()),
        }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

/// Lossless decimal float formatting (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(msg.into())
}

fn write_file(path: &Path, content: &[u8]) -> CmdResult<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| usage(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(content)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn read_images(path: &Path) -> CmdResult<ImageSet> {
    let bytes =
        std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    match read_idx(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))? {
        IdxData::Images(set) => Ok(set),
        IdxData::Labels(_) => Err(usage(format!(
            "{} holds labels, expected images",
            path.display()
        ))),
    }
}

fn read_labels(path: &Path) -> CmdResult<Vec<u8>> {
    let bytes =
        std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    match read_idx(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => Err(usage(format!(
            "{} holds images, expected labels",
            path.display()
        ))),
    }
}

/// Materialized dataset: clean images (x), observations (y), and the split.
pub struct PreparedData {
    pub height: usize,
    pub width: usize,
    pub train_x: Tensor,
    pub train_y: Tensor,
    pub val_x: Tensor,
    pub val_y: Tensor,
    pub labels: Option<Vec<u8>>,
}

fn split_rows(m: &Tensor, at: usize) -> (Tensor, Tensor) {
    let c = m.cols();
    let head = Tensor::from_vec(&[at, c], m.data()[..at * c].to_vec()).unwrap();
    let tail = Tensor::from_vec(&[m.rows() - at, c], m.data()[at * c..].to_vec()).unwrap();
    (head, tail)
}

/// Generates or loads the clean set, applies the configured corruption and
/// optional SNR noise, and splits off the validation tail.
pub fn prepare_dataset(cfg: &RunConfig) -> CmdResult<PreparedData> {
    let images = match &cfg.dataset.source {
        DataSource::Procedural { count, height, width } => {
            let mut rng = RngState::new(cfg.seed ^ 0x6461_7461);
            pae_core::data::gen_shapes(&mut rng, *count, *height, *width)?
        }
        DataSource::Idx { images, count, .. } => {
            let set = read_images(Path::new(images))?;
            match count {
                Some(c) => {
                    let keep = (*c).min(set.count());
                    set.slice(0, keep)?
                }
                None => set,
            }
        }
    };
    let labels = match &cfg.dataset.source {
        DataSource::Idx {
            labels: Some(lp), ..
        } => Some(read_labels(Path::new(lp))?),
        _ => None,
    };

    let spec = cfg.dataset.corruption.to_spec(cfg.seed);
    let mut ys = spec.apply(&images)?;
    if let Some(db) = cfg.dataset.noise_db {
        // SNR calibrated over the whole observation set.
        let mut rng = RngState::new(cfg.seed ^ 0x6e6f_6973);
        ys = pae_core::data::add_noise_snr(&ys, db, &mut rng)?;
    }

    let xs = images.flat_matrix();
    let n = xs.rows();
    let val = cfg.dataset.val_count;
    if val >= n {
        return Err(usage(format!("val_count {val} leaves no training rows")));
    }
    let (train_x, val_x) = split_rows(&xs, n - val);
    let (train_y, val_y) = split_rows(&ys, n - val);
    Ok(PreparedData {
        height: images.height(),
        width: images.width(),
        train_x,
        train_y,
        val_x,
        val_y,
        labels,
    })
}

fn combined_loss(model: &PairedModel, data: &PairSet) -> CmdResult<f64> {
    let cfg = TrainConfig::default();
    Ok(pae_core::paired::paired_loss(model, data, &cfg, ParamGroup::All)?.0)
}

/// Builds and fits the configured model, returning it with per-epoch losses.
pub fn fit_model(cfg: &RunConfig, data: &PreparedData) -> CmdResult<(SavedModel, Vec<f64>)> {
    let dim = data.train_x.cols();
    let (r_x, r_y) = (cfg.model.latent_x, cfg.model.latent_y);
    let widths = &cfg.model.encoder_widths;
    match cfg.model.kind {
        ModelKind::Mlp => {
            let mut rng = RngState::new(cfg.seed ^ 0x6d6f_6465);
            let model = PairedModel::mlp_default(
                dim,
                dim,
                r_x,
                r_y,
                widths,
                cfg.model.identity_maps,
                &mut rng,
            )?;
            let pairs = PairSet::new(data.train_x.clone(), data.train_y.clone())?;
            let (model, log) = train_paired(model, &pairs, &cfg.train.to_core(cfg.seed))?;
            Ok((SavedModel::Paired(model), log.epoch_losses))
        }
        ModelKind::Linear => {
            let sm_x = second_moment_factor(
                &data.train_x,
                default_ridge(trace_of_gram(&data.train_x), dim),
            )?;
            let sm_y = second_moment_factor(
                &data.train_y,
                default_ridge(trace_of_gram(&data.train_y), dim),
            )?;
            let ae_x = fit_linear_ae(&sm_x, r_x)?;
            let ae_y = fit_linear_ae(&sm_y, r_y)?;
            let model_stub = PairedModel::from_linear(
                &ae_x,
                &ae_y,
                &pae_core::linear::LinearMaps {
                    forward: Tensor::zeros(&[r_y, r_x]),
                    inverse: Tensor::zeros(&[r_x, r_y]),
                },
            )?;
            let z_x = model_stub.encode_x(&data.train_x)?;
            let z_y = model_stub.encode_y(&data.train_y)?;
            let maps = fit_latent_maps_lstsq(&z_x, &z_y, 1e-8)?;
            let model = PairedModel::from_linear(&ae_x, &ae_y, &maps)?;
            let pairs = PairSet::new(data.train_x.clone(), data.train_y.clone())?;
            let loss = combined_loss(&model, &pairs)?;
            Ok((SavedModel::Paired(model), vec![loss]))
        }
        ModelKind::Vpae => {
            let mut rng = RngState::new(cfg.seed ^ 0x6d6f_6465);
            let vpae =
                VpaeModel::mlp_default(dim, dim, r_x, r_y, widths, cfg.model.sigma, &mut rng)?;
            let sgd = SgdConfig {
                lr: cfg.train.lr,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                seed: cfg.seed,
            };
            let (vpae, losses) = train_vpae(vpae, &data.train_x, &data.train_y, &sgd)?;
            Ok((SavedModel::Vpae(vpae), losses))
        }
        ModelKind::LatentMap => {
            let mut rng = RngState::new(cfg.seed ^ 0x6d6f_6465);
            let model = PairedModel::mlp_default(
                dim,
                dim,
                r_x,
                r_y,
                widths,
                cfg.model.identity_maps,
                &mut rng,
            )?;
            let pairs = PairSet::new(data.train_x.clone(), data.train_y.clone())?;
            let (model, log) = train_paired(model, &pairs, &cfg.train.to_core(cfg.seed))?;
            // Frozen encoders produce the latent training pairs.
            let z_y = model.encode_y(&data.train_y)?;
            let z_x = model.encode_x(&data.train_x)?;
            let hidden = cfg.model.latent_map_hidden.unwrap_or(128);
            let map = VariationalLatentMap::mlp_default(
                r_y,
                r_x,
                hidden,
                cfg.model.sigma,
                &mut rng,
            )?;
            let sgd = SgdConfig {
                lr: cfg.train.lr,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                seed: cfg.seed ^ 0x6c61_7465,
            };
            let (map, map_losses) = train_variational_latent_map(map, &z_y, &z_x, &sgd)?;
            let mut losses = log.epoch_losses;
            losses.extend(map_losses);
            Ok((SavedModel::LatentMap { paired: model, map }, losses))
        }
    }
}

fn trace_of_gram(samples: &Tensor) -> f64 {
    // trace((1/N) X^T X) = mean squared row norm.
    let n = samples.rows() as f64;
    samples.data().iter().map(|v| v * v).sum::<f64>() / n
}

fn matrix_csv(header_prefix: &str, m: &Tensor) -> String {
    let mut out = String::from(header_prefix);
    for j in 0..m.cols() {
        out.push_str(&format!(",p{j}"));
    }
    out.push('\n');
    for i in 0..m.rows() {
        out.push_str(&i.to_string());
        for &v in m.row(i) {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

/// `pae train`: fit the configured model, write the checkpoint and the
/// per-epoch training summary.
pub fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CmdResult<()> {
    let mut cfg = RunConfig::from_file(config_path).map_err(usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(usage)?;

    let data = prepare_dataset(&cfg)?;
    let (model, losses) = fit_model(&cfg, &data)?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", out_dir.display())))?;
    checkpoint::save(&out_dir.join("checkpoint.pae"), &model, &cfg).map_err(usage)?;

    let mut log = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{i},{}\n", fmt_f64(*l)));
    }
    write_file(&out_dir.join("train_log.csv"), log.as_bytes())?;

    if cfg.dataset.emit_data {
        let (h, w) = (data.height, data.width);
        write_file(
            &out_dir.join("train_x.idx"),
            &write_idx_images(h, w, &data.train_x),
        )?;
        write_file(
            &out_dir.join("train_y.idx"),
            &write_idx_images(h, w, &data.train_y),
        )?;
        if data.val_x.rows() > 0 {
            write_file(
                &out_dir.join("val_x.idx"),
                &write_idx_images(h, w, &data.val_x),
            )?;
            write_file(
                &out_dir.join("val_y.idx"),
                &write_idx_images(h, w, &data.val_y),
            )?;
        }
    }
    Ok(())
}

fn paired_view(model: &SavedModel) -> Option<&PairedModel> {
    match model {
        SavedModel::Paired(p) => Some(p),
        SavedModel::LatentMap { paired, .. } => Some(paired),
        SavedModel::Vpae(_) => None,
    }
}

fn direct_estimate(model: &SavedModel, ys: &Tensor) -> CmdResult<Tensor> {
    match model {
        SavedModel::Paired(p) => Ok(p.direct_estimate(ys)?),
        SavedModel::Vpae(v) => {
            let mut out = Tensor::zeros(&[ys.rows(), v.ae_x.decoder.out_dim()]);
            for i in 0..ys.rows() {
                let x = v.direct_estimate(&ys.row_matrix(i))?;
                out.row_mut(i).copy_from_slice(x.row(0));
            }
            Ok(out)
        }
        SavedModel::LatentMap { paired, map } => {
            // Mean path through the stochastic latent map.
            let z_y = paired.encode_y(ys)?;
            let (h, _) = map.encoder.forward(&z_y)?;
            let dim = map.decoder.in_dim();
            let mut mu = Tensor::zeros(&[h.rows(), dim]);
            for r in 0..h.rows() {
                mu.row_mut(r).copy_from_slice(&h.row(r)[..dim]);
            }
            let (z_x, _) = map.decoder.forward(&mu)?;
            Ok(paired.decode_x(&z_x)?)
        }
    }
}

fn decoder_block(model: &SavedModel) -> Block {
    match model {
        SavedModel::Paired(p) => p.d_x.clone(),
        SavedModel::Vpae(v) => Block::Mlp(v.ae_x.decoder.clone()),
        SavedModel::LatentMap { paired, .. } => paired.d_x.clone(),
    }
}

fn warm_start_row(model: &SavedModel, y: &Tensor) -> CmdResult<Tensor> {
    match model {
        SavedModel::Paired(p) => Ok(pae_core::inversion::warm_start(p, y)?),
        SavedModel::Vpae(v) => {
            let g = v.map_inverse_latent(y)?;
            Ok(g.mu.reshape(&[1, v.ae_x.latent_dim])?)
        }
        SavedModel::LatentMap { paired, map } => {
            let z_y = paired.encode_y(y)?;
            let (h, _) = map.encoder.forward(&z_y)?;
            let dim = map.decoder.in_dim();
            let mu = Tensor::from_vec(&[1, dim], h.row(0)[..dim].to_vec()).unwrap();
            let (z_x, _) = map.decoder.forward(&mu)?;
            Ok(z_x)
        }
    }
}

fn latent_dim_x(model: &SavedModel) -> usize {
    match model {
        SavedModel::Paired(p) => p.r_x,
        SavedModel::Vpae(v) => v.ae_x.latent_dim,
        SavedModel::LatentMap { paired, .. } => paired.r_x,
    }
}

fn x_dim(model: &SavedModel) -> usize {
    match model {
        SavedModel::Paired(p) => p.x_dim(),
        SavedModel::Vpae(v) => v.ae_x.decoder.out_dim(),
        SavedModel::LatentMap { paired, .. } => paired.x_dim(),
    }
}

fn y_dim(model: &SavedModel) -> usize {
    match model {
        SavedModel::Paired(p) => p.y_dim(),
        SavedModel::Vpae(v) => v.ae_y.encoder.in_dim(),
        SavedModel::LatentMap { paired, .. } => paired.y_dim(),
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InvertMode {
    Direct,
    Lsi { cold: bool },
}

struct TruthMetrics {
    rows: Vec<(usize, f64, Option<f64>)>,
}

fn truth_metrics(
    estimates: &Tensor,
    truth: &Tensor,
    height: usize,
    width: usize,
) -> CmdResult<TruthMetrics> {
    let mut rows = Vec::with_capacity(estimates.rows());
    for i in 0..estimates.rows() {
        let xh = Tensor::vector(estimates.row(i).to_vec());
        let xt = Tensor::vector(truth.row(i).to_vec());
        let re = rel_err(&xh, &xt)?;
        let s = if height >= 7 && width >= 7 {
            let a = xh.reshape(&[height, width])?;
            let b = xt.reshape(&[height, width])?;
            ssim(&a, &b).ok()
        } else {
            None
        };
        rows.push((i, re, s));
    }
    Ok(TruthMetrics { rows })
}

/// `pae invert`: direct estimates or latent-space inversion over an IDX
/// observation file, with optional ground truth and per-sample masks.
#[allow(clippy::too_many_arguments)]
pub fn cmd_invert(
    checkpoint_path: &Path,
    data_path: &Path,
    truth_path: Option<&Path>,
    mask_path: Option<&Path>,
    mode: InvertMode,
    _seed: Option<u64>,
    out: &Path,
) -> CmdResult<()> {
    let (model, cfg) = checkpoint::load(checkpoint_path).map_err(usage)?;
    let data = read_images(data_path)?;
    let ys = data.flat_matrix();
    if ys.cols() != y_dim(&model) {
        return Err(usage(format!(
            "observation dimension {} does not match model ({})",
            ys.cols(),
            y_dim(&model)
        )));
    }
    let truth = match truth_path {
        Some(p) => {
            let t = read_images(p)?.flat_matrix();
            if t.rows() != ys.rows() || t.cols() != x_dim(&model) {
                return Err(usage("ground-truth file does not match the data"));
            }
            Some(t)
        }
        None => None,
    };
    let masks = match mask_path {
        Some(p) => {
            let m = read_images(p)?.flat_matrix();
            if m.rows() != ys.rows() || m.cols() != x_dim(&model) {
                return Err(usage("mask file does not match the data"));
            }
            Some(m.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
        }
        None => None,
    };

    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;

    let estimates;
    let mut trace_csv: Option<String> = None;
    match mode {
        InvertMode::Direct => {
            estimates = direct_estimate(&model, &ys)?;
        }
        InvertMode::Lsi { cold } => {
            if masks.is_none() && x_dim(&model) != y_dim(&model) {
                return Err(usage(
                    "LSI without --mask needs matching x/y dimensions (identity operator)",
                ));
            }
            let decoder = decoder_block(&model);
            let lsi_cfg: LsiConfig = cfg.lsi.to_core(!cold);
            let mut est = Tensor::zeros(&[ys.rows(), x_dim(&model)]);
            let mut trace = String::from("sample,iter,misfit\n");
            for i in 0..ys.rows() {
                let y_row = ys.row_matrix(i);
                let op = match &masks {
                    Some(m) => ForwardOp::from_mask(Tensor::vector(m.row(i).to_vec()))?,
                    None => ForwardOp::from_mask(Tensor::filled(&[x_dim(&model)], 1.0))?,
                };
                let z0 = if cold {
                    Tensor::zeros(&[1, latent_dim_x(&model)])
                } else {
                    warm_start_row(&model, &y_row)?
                };
                let y_vec = Tensor::vector(y_row.row(0).to_vec());
                let res = lsi_with_start(&decoder, &op, &y_vec, &z0, &lsi_cfg)?;
                est.row_mut(i).copy_from_slice(res.x_hat.row(0));
                for (it, m) in res.misfit_trace.iter().enumerate() {
                    trace.push_str(&format!("{i},{it},{}\n", fmt_f64(*m)));
                }
            }
            estimates = est;
            trace_csv = Some(trace);
        }
    }

    write_file(
        &out.join("estimates.csv"),
        matrix_csv("sample", &estimates).as_bytes(),
    )?;
    if let Some(t) = trace_csv {
        write_file(&out.join("misfit_trace.csv"), t.as_bytes())?;
    }
    if let Some(truth) = truth {
        let tm = truth_metrics(&estimates, &truth, data.height(), data.width())?;
        let mut csv = String::from("sample,rel_err,ssim\n");
        for (i, re, s) in tm.rows {
            match s {
                Some(s) => csv.push_str(&format!("{i},{},{}\n", fmt_f64(re), fmt_f64(s))),
                None => csv.push_str(&format!("{i},{},\n", fmt_f64(re))),
            }
        }
        write_file(&out.join("metrics.csv"), csv.as_bytes())?;
    }
    Ok(())
}

/// `pae ood`: fit the baseline metric distribution on one IDX file, score
/// another, and emit histogram/scatter/percentile CSVs.
pub fn cmd_ood(
    checkpoint_path: &Path,
    baseline_path: &Path,
    probe_path: &Path,
    pair: (usize, usize),
    out: &Path,
) -> CmdResult<()> {
    let (model, _) = checkpoint::load(checkpoint_path).map_err(usage)?;
    let paired = paired_view(&model).ok_or_else(|| {
        usage("ood scoring needs a deterministic paired checkpoint".to_string())
    })?;
    let baseline_ys = read_images(baseline_path)?.flat_matrix();
    let probe_ys = read_images(probe_path)?.flat_matrix();
    if baseline_ys.cols() != paired.y_dim() || probe_ys.cols() != paired.y_dim() {
        return Err(usage("data dimension does not match the model"));
    }
    let baseline = fit_baseline(paired, &baseline_ys)?;

    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;

    let mut records = Vec::with_capacity(probe_ys.rows());
    let mut csv = String::from(
        "sample,m1,m2,m3,m4,m5,p1,p2,p3,p4,p5,flag\n",
    );
    for i in 0..probe_ys.rows() {
        let rec = recon_metrics(paired, &probe_ys.row_matrix(i))?;
        let (pct, flag) = ood_score(&baseline, &rec);
        csv.push_str(&i.to_string());
        for v in rec.m {
            csv.push(',');
            csv.push_str(&fmt_f64(v));
        }
        for p in pct {
            csv.push(',');
            csv.push_str(&fmt_f64(p));
        }
        csv.push_str(if flag { ",1\n" } else { ",0\n" });
        records.push(rec);
    }
    write_file(&out.join("percentiles.csv"), csv.as_bytes())?;
    export_report(&records, &baseline, out, pair)?;
    Ok(())
}

/// `pae sample`: decoded posterior samples plus mean/std images for each
/// probe. Needs a variational checkpoint. With `n == 1` the std file is
/// omitted (a single draw has no spread).
pub fn cmd_sample(
    checkpoint_path: &Path,
    data_path: &Path,
    n: usize,
    seed: Option<u64>,
    out: &Path,
) -> CmdResult<()> {
    if n == 0 {
        return Err(usage("sample count must be >= 1"));
    }
    let (model, cfg) = checkpoint::load(checkpoint_path).map_err(usage)?;
    let ys = read_images(data_path)?.flat_matrix();
    if ys.cols() != y_dim(&model) {
        return Err(usage("data dimension does not match the model"));
    }
    let mut rng = RngState::new(seed.unwrap_or(cfg.seed ^ 0x7361_6d70));

    let sample_one = |model: &SavedModel, y: &Tensor, rng: &mut RngState| -> CmdResult<Vec<Tensor>> {
        match model {
            SavedModel::Vpae(v) => Ok(vpae_sample_inference(v, y, n, rng)?),
            SavedModel::LatentMap { paired, map } => {
                let z_y = paired.encode_y(y)?;
                let draws = latent_map_sample(map, &Tensor::vector(z_y.row(0).to_vec()), n, rng)?;
                let mut out = Vec::with_capacity(n);
                for d in draws {
                    let x = paired.decode_x(&d.reshape(&[1, paired.r_x])?)?;
                    out.push(Tensor::vector(x.row(0).to_vec()));
                }
                Ok(out)
            }
            SavedModel::Paired(_) => Err(usage(
                "sampling needs a variational checkpoint (vpae or latent-map)".to_string(),
            )),
        }
    };

    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;

    let dim = x_dim(&model);
    let mut samples_csv = String::from("probe,sample");
    for j in 0..dim {
        samples_csv.push_str(&format!(",p{j}"));
    }
    samples_csv.push('\n');
    let mut mean_rows = Tensor::zeros(&[ys.rows(), dim]);
    let mut std_rows = Tensor::zeros(&[ys.rows(), dim]);
    for i in 0..ys.rows() {
        let draws = sample_one(&model, &ys.row_matrix(i), &mut rng)?;
        for (k, d) in draws.iter().enumerate() {
            samples_csv.push_str(&format!("{i},{k}"));
            for &v in d.data() {
                samples_csv.push(',');
                samples_csv.push_str(&fmt_f64(v));
            }
            samples_csv.push('\n');
        }
        if n >= 2 {
            let stats = pixel_stats(&draws)?;
            mean_rows.row_mut(i).copy_from_slice(stats.mean.data());
            std_rows.row_mut(i).copy_from_slice(stats.std.data());
        } else {
            mean_rows.row_mut(i).copy_from_slice(draws[0].data());
        }
    }
    write_file(&out.join("samples.csv"), samples_csv.as_bytes())?;
    write_file(
        &out.join("mean.csv"),
        matrix_csv("probe", &mean_rows).as_bytes(),
    )?;
    if n >= 2 {
        write_file(
            &out.join("std.csv"),
            matrix_csv("probe", &std_rows).as_bytes(),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSide {
    X,
    Y,
}

/// `pae export-latents`: one CSV row per sample with its latent coordinates
/// and an optional label column.
pub fn cmd_export_latents(
    checkpoint_path: &Path,
    data_path: &Path,
    labels_path: Option<&Path>,
    side: LatentSide,
    out: &Path,
) -> CmdResult<()> {
    let (model, _) = checkpoint::load(checkpoint_path).map_err(usage)?;
    let bytes = std::fs::read(data_path)
        .map_err(|e| usage(format!("cannot read {}: {e}", data_path.display())))?;
    // An images file with a zero count is still exportable: header only.
    let empty = bytes.len() >= 8
        && bytes[..4] == pae_core::data::IDX_MAGIC_IMAGES.to_be_bytes()
        && bytes[4..8] == [0, 0, 0, 0];

    let latent_dim = match side {
        LatentSide::X => latent_dim_x(&model),
        LatentSide::Y => match &model {
            SavedModel::Paired(p) => p.r_y,
            SavedModel::Vpae(v) => v.ae_y.latent_dim,
            SavedModel::LatentMap { paired, .. } => paired.r_y,
        },
    };
    let mut csv = String::from("sample");
    for j in 0..latent_dim {
        csv.push_str(&format!(",z{}", j + 1));
    }
    let labels = match labels_path {
        Some(p) => Some(read_labels(p)?),
        None => None,
    };
    if labels.is_some() {
        csv.push_str(",label");
    }
    csv.push('\n');

    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;

    if !empty {
        let rows = read_images(data_path)?.flat_matrix();
        let expected = match side {
            LatentSide::X => x_dim(&model),
            LatentSide::Y => y_dim(&model),
        };
        if rows.cols() != expected {
            return Err(usage("data dimension does not match the model"));
        }
        if let Some(l) = &labels {
            if l.len() != rows.rows() {
                return Err(usage("label count does not match the data"));
            }
        }
        let latents = match (&model, side) {
            (SavedModel::Paired(p), LatentSide::X) => p.encode_x(&rows)?,
            (SavedModel::Paired(p), LatentSide::Y) => p.encode_y(&rows)?,
            (SavedModel::LatentMap { paired, .. }, LatentSide::X) => paired.encode_x(&rows)?,
            (SavedModel::LatentMap { paired, .. }, LatentSide::Y) => paired.encode_y(&rows)?,
            (SavedModel::Vpae(v), LatentSide::X) => {
                let (h, _) = v.ae_x.encoder.forward(&rows)?;
                take_mu(&h, v.ae_x.latent_dim)
            }
            (SavedModel::Vpae(v), LatentSide::Y) => {
                let (h, _) = v.ae_y.encoder.forward(&rows)?;
                take_mu(&h, v.ae_y.latent_dim)
            }
        };
        for i in 0..latents.rows() {
            csv.push_str(&i.to_string());
            for &v in latents.row(i) {
                csv.push(',');
                csv.push_str(&fmt_f64(v));
            }
            if let Some(l) = &labels {
                csv.push_str(&format!(",{}", l[i]));
            }
            csv.push('\n');
        }
    }
    write_file(&out.join("latents.csv"), csv.as_bytes())?;
    Ok(())
}

fn take_mu(h: &Tensor, dim: usize) -> Tensor {
    let mut mu = Tensor::zeros(&[h.rows(), dim]);
    for r in 0..h.rows() {
        mu.row_mut(r).copy_from_slice(&h.row(r)[..dim]);
    }
    mu
}
