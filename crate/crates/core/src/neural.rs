//! Dense networks, per-modality autoencoders and the combined latent-fusion
//! model.
//!
//! Parameters of an [`Mlp`] live in one flat vector: for each layer the
//! weight matrix (`out x in`, row-major) followed by its bias. Loss is the
//! mean squared error over every output element of the batch.

use std::io::{BufRead, Write};

use crate::dataio::{Dataset, FeatureSchema, Modality, ModalitySet};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Argument(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::Shape(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Shape("layer widths must be positive".into()));
        }
        let mut params = Vec::with_capacity(param_count(widths));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activations: activations.to_vec(),
            params,
        })
    }

    pub fn from_params(widths: &[usize], activations: &[Activation], params: Vec<f64>) -> Result<Self> {
        let mut mlp = Mlp::new(widths, activations, &mut Rng::new(0))?;
        if params.len() != mlp.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                mlp.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// Offset of layer `l`'s weights and of its bias in the flat vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut offset = 0;
        for pair in self.widths.windows(2).take(l) {
            offset += pair[0] * pair[1] + pair[1];
        }
        (offset, offset + self.widths[l] * self.widths[l + 1])
    }

    /// Sets the output layer's bias.
    pub fn set_output_bias(&mut self, values: &[f64]) {
        let l = self.widths.len() - 2;
        let (_, b) = self.layer_offsets(l);
        self.params[b..b + values.len()].copy_from_slice(values);
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

/// All layer outputs, the input first.
pub fn forward(mlp: &Mlp, x: &Matrix) -> Result<Vec<Matrix>> {
    if x.cols() != mlp.input_width() {
        return Err(Error::Shape(format!(
            "network expects {} inputs, got {}",
            mlp.input_width(),
            x.cols()
        )));
    }
    let n = x.rows();
    let mut acts = Vec::with_capacity(mlp.widths.len());
    acts.push(x.clone());
    for l in 0..mlp.widths.len() - 1 {
        let (fan_in, fan_out) = (mlp.widths[l], mlp.widths[l + 1]);
        let (w_off, b_off) = mlp.layer_offsets(l);
        let w = &mlp.params[w_off..b_off];
        let b = &mlp.params[b_off..b_off + fan_out];
        let act = mlp.activations[l];
        let input = acts[l].as_slice();
        let mut out = vec![0.0; n * fan_out];
        for r in 0..n {
            let x_row = &input[r * fan_in..(r + 1) * fan_in];
            let o_row = &mut out[r * fan_out..(r + 1) * fan_out];
            for (o, slot) in o_row.iter_mut().enumerate() {
                let w_row = &w[o * fan_in..(o + 1) * fan_in];
                let z = b[o] + w_row.iter().zip(x_row).map(|(a, c)| a * c).sum::<f64>();
                *slot = act.apply(z);
            }
        }
        acts.push(Matrix::from_vec(n, fan_out, out)?);
    }
    Ok(acts)
}

pub fn predict(mlp: &Mlp, x: &Matrix) -> Result<Matrix> {
    Ok(forward(mlp, x)?.pop().expect("non-empty"))
}

/// Reverse pass from the loss gradient at the output. Returns parameter
/// gradients and the gradient with respect to the input.
pub fn backward(mlp: &Mlp, acts: &[Matrix], d_output: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let last = acts.len() - 1;
    if d_output.rows() != acts[last].rows() || d_output.cols() != acts[last].cols() {
        return Err(Error::Shape("output gradient does not match the forward pass".into()));
    }
    let n = d_output.rows();
    let mut grads = vec![0.0; mlp.params.len()];
    let mut upstream = d_output.as_slice().to_vec();
    for l in (0..last).rev() {
        let (fan_in, fan_out) = (mlp.widths[l], mlp.widths[l + 1]);
        let (w_off, b_off) = mlp.layer_offsets(l);
        let act = mlp.activations[l];
        let out = acts[l + 1].as_slice();
        let input = acts[l].as_slice();
        for (d, a) in upstream.iter_mut().zip(out) {
            *d *= act.derivative_from_output(*a);
        }
        let w = &mlp.params[w_off..b_off];
        let mut d_input = vec![0.0; n * fan_in];
        {
            let (gw, gb) = grads[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..n {
                let delta = &upstream[r * fan_out..(r + 1) * fan_out];
                let x_row = &input[r * fan_in..(r + 1) * fan_in];
                let d_row = &mut d_input[r * fan_in..(r + 1) * fan_in];
                for (o, &dz) in delta.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    gb[o] += dz;
                    let g_row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    let w_row = &w[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        g_row[i] += dz * x_row[i];
                        d_row[i] += dz * w_row[i];
                    }
                }
            }
        }
        upstream = d_input;
    }
    let d_in = Matrix::from_vec(n, mlp.widths[0], upstream)?;
    Ok((grads, d_in))
}

/// Mean squared error over all elements and its gradient.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let count = (pred.rows() * pred.cols()).max(1) as f64;
    let diff: Vec<f64> = pred.as_slice().iter().zip(target.as_slice()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let grad = diff.iter().map(|d| 2.0 * d / count).collect();
    Ok((loss, Matrix::from_vec(pred.rows(), pred.cols(), grad)?))
}

/// Loss and parameter gradients of the MSE between `mlp(x)` and `target`.
pub fn grad(mlp: &Mlp, x: &Matrix, target: &Matrix) -> Result<(f64, Vec<f64>)> {
    let acts = forward(mlp, x)?;
    let (loss, d_out) = mse_loss(acts.last().expect("non-empty"), target)?;
    let (grads, _) = backward(mlp, &acts, &d_out)?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub fine_tune_encoders: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            pretrain_epochs: 30,
            fine_tune_encoders: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Argument("batch size and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses; index 0 is the loss before any update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurves {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Tracks the best validation loss and decides when to stop.
struct EarlyStopping {
    best: f64,
    best_epoch: usize,
    patience: usize,
}

impl EarlyStopping {
    fn new(initial: f64, patience: usize) -> Self {
        EarlyStopping {
            best: initial,
            best_epoch: 0,
            patience,
        }
    }

    /// Returns (improved, should_stop).
    fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            (true, false)
        } else {
            (false, epoch - self.best_epoch >= self.patience)
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub modality: Modality,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    /// Encoder `p -> hidden -> latent`, mirrored decoder; the latent and
    /// reconstruction layers are linear.
    pub fn new(modality: Modality, p: usize, hidden: usize, latent: usize, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let encoder = Mlp::new(&[p, hidden, latent], &[activation, Activation::Linear], rng)?;
        let decoder = Mlp::new(&[latent, hidden, p], &[activation, Activation::Linear], rng)?;
        Ok(Autoencoder {
            modality,
            encoder,
            decoder,
        })
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.output_width()
    }
}

pub fn reconstruct(ae: &Autoencoder, x: &Matrix) -> Result<Matrix> {
    predict(&ae.decoder, &predict(&ae.encoder, x)?)
}

pub fn reconstruction_mse(ae: &Autoencoder, x: &Matrix) -> Result<f64> {
    Ok(mse_loss(&reconstruct(ae, x)?, x)?.0)
}

fn autoencoder_step(ae: &mut Autoencoder, x: &Matrix, states: &mut [AdamState; 2], lr: f64) -> Result<f64> {
    let enc_acts = forward(&ae.encoder, x)?;
    let dec_acts = forward(&ae.decoder, enc_acts.last().expect("non-empty"))?;
    let (loss, d_out) = mse_loss(dec_acts.last().expect("non-empty"), x)?;
    let (g_dec, d_latent) = backward(&ae.decoder, &dec_acts, &d_out)?;
    let (g_enc, _) = backward(&ae.encoder, &enc_acts, &d_latent)?;
    adam_step(&mut ae.decoder.params, &g_dec, &mut states[1], lr)?;
    adam_step(&mut ae.encoder.params, &g_enc, &mut states[0], lr)?;
    Ok(loss)
}

/// Minimises reconstruction MSE with minibatch Adam for up to `epochs`,
/// early-stopping on `x_val` (or the training loss when `x_val` is empty) and
/// restoring the best parameters.
pub fn train_autoencoder(ae: &mut Autoencoder, x_train: &Matrix, x_val: &Matrix, cfg: &TrainConfig, epochs: usize) -> Result<LossCurves> {
    cfg.validate()?;
    if x_train.rows() == 0 {
        return Err(Error::Argument("empty training set".into()));
    }
    let monitor = if x_val.rows() > 0 { x_val } else { x_train };
    let mut rng = Rng::new(cfg.seed);
    let mut states = [
        AdamState::new(ae.encoder.params.len()),
        AdamState::new(ae.decoder.params.len()),
    ];
    let mut curves = LossCurves {
        train: vec![reconstruction_mse(ae, x_train)?],
        validation: vec![reconstruction_mse(ae, monitor)?],
        best_epoch: 0,
    };
    let mut stopper = EarlyStopping::new(curves.validation[0], cfg.patience);
    let mut best = ae.clone();
    for epoch in 1..=epochs {
        for batch in batches(x_train.rows(), cfg.batch_size, &mut rng) {
            autoencoder_step(ae, &x_train.select_rows(&batch), &mut states, cfg.learning_rate)?;
        }
        curves.train.push(reconstruction_mse(ae, x_train)?);
        let val = reconstruction_mse(ae, monitor)?;
        curves.validation.push(val);
        let (improved, stop) = stopper.observe(epoch, val);
        if improved {
            best = ae.clone();
        }
        if stop {
            break;
        }
    }
    *ae = best;
    curves.best_epoch = stopper.best_epoch;
    Ok(curves)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub encoder_hidden: usize,
    pub latent: usize,
    pub regressor_hidden: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder_hidden: 32,
            latent: 8,
            regressor_hidden: 32,
            activation: Activation::Relu,
        }
    }
}

/// One block of input columns feeding one autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub autoencoder: Autoencoder,
    pub columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedModel {
    /// In modality order PF, BG, PHQ9.
    pub blocks: Vec<Block>,
    pub regressor: Mlp,
    pub clip: Option<(f64, f64)>,
    fitted: bool,
}

/// Target range of PHQ-2 scores.
pub const PHQ2_RANGE: (f64, f64) = (0.0, 6.0);

impl CombinedModel {
    /// One autoencoder per selected modality present in `schema`.
    pub fn new(schema: &FeatureSchema, modalities: ModalitySet, arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut blocks = Vec::new();
        for m in modalities.iter() {
            let columns: Vec<String> = schema.columns_of(m).into_iter().map(|c| schema.columns[c].name.clone()).collect();
            if columns.is_empty() {
                return Err(Error::Argument(format!("modality {m} has no columns in the dataset")));
            }
            let ae = Autoencoder::new(m, columns.len(), arch.encoder_hidden, arch.latent, arch.activation, &mut rng)?;
            blocks.push(Block { autoencoder: ae, columns });
        }
        if blocks.is_empty() {
            return Err(Error::Argument("combined model needs at least one modality".into()));
        }
        let latent_total: usize = blocks.iter().map(|b| b.autoencoder.latent_width()).sum();
        let regressor = Mlp::new(
            &[latent_total, arch.regressor_hidden, 1],
            &[arch.activation, Activation::Linear],
            &mut rng,
        )?;
        Ok(CombinedModel {
            blocks,
            regressor,
            clip: Some(PHQ2_RANGE),
            fitted: false,
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn modalities(&self) -> ModalitySet {
        ModalitySet::of(&self.blocks.iter().map(|b| b.autoencoder.modality).collect::<Vec<_>>())
    }

    pub fn parameter_count(&self) -> usize {
        self.regressor.params.len()
            + self
                .blocks
                .iter()
                .map(|b| b.autoencoder.encoder.params.len() + b.autoencoder.decoder.params.len())
                .sum::<usize>()
    }

    /// Per-block input matrices taken from `dataset` by column name.
    pub fn block_inputs(&self, dataset: &Dataset) -> Result<Vec<Matrix>> {
        let x = dataset.feature_matrix();
        self.blocks
            .iter()
            .map(|b| {
                let idx = b
                    .columns
                    .iter()
                    .map(|name| {
                        dataset.schema.index_of(name).ok_or_else(|| {
                            Error::Argument(format!(
                                "column `{name}` of modality {} is absent from the dataset",
                                b.autoencoder.modality
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(x.select_columns(&idx))
            })
            .collect()
    }
}

/// Concatenated latents in PF, BG, PHQ9 order.
pub fn encode(cm: &CombinedModel, dataset: &Dataset) -> Result<Matrix> {
    let inputs = cm.block_inputs(dataset)?;
    let latents = cm
        .blocks
        .iter()
        .zip(&inputs)
        .map(|(b, x)| predict(&b.autoencoder.encoder, x))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hstack(&latents.iter().collect::<Vec<_>>())
}

fn target_matrix(dataset: &Dataset) -> Matrix {
    Matrix::from_column(&dataset.targets())
}

fn combined_loss(cm: &CombinedModel, inputs: &[Matrix], y: &Matrix) -> Result<f64> {
    let latents = cm
        .blocks
        .iter()
        .zip(inputs)
        .map(|(b, x)| predict(&b.autoencoder.encoder, x))
        .collect::<Result<Vec<_>>>()?;
    let z = Matrix::hstack(&latents.iter().collect::<Vec<_>>())?;
    Ok(mse_loss(&predict(&cm.regressor, &z)?, y)?.0)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CombinedCurves {
    /// One reconstruction curve per block.
    pub pretrain: Vec<LossCurves>,
    pub regression: LossCurves,
}

/// Phase 1: trains each block's autoencoder on its own columns.
pub fn pretrain(cm: &mut CombinedModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossCurves>> {
    let tr = cm.block_inputs(train)?;
    let va = cm.block_inputs(val)?;
    let mut curves = Vec::new();
    for (i, block) in cm.blocks.iter_mut().enumerate() {
        let block_cfg = TrainConfig {
            seed: crate::numerics::derive_seed(cfg.seed, i as u64),
            ..*cfg
        };
        curves.push(train_autoencoder(&mut block.autoencoder, &tr[i], &va[i], &block_cfg, cfg.pretrain_epochs)?);
    }
    Ok(curves)
}

/// Phase 2: trains the regressor on concatenated latents, back-propagating
/// into the encoders when `fine_tune_encoders` is set. Early-stops on
/// validation MSE and restores the best parameters.
pub fn train_head(cm: &mut CombinedModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<LossCurves> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let tr = cm.block_inputs(train)?;
    let y_tr = target_matrix(train);
    let (va, y_va) = if val.is_empty() {
        (tr.clone(), y_tr.clone())
    } else {
        (cm.block_inputs(val)?, target_matrix(val))
    };
    let mean_y = crate::numerics::mean(y_tr.as_slice());
    cm.regressor.set_output_bias(&[mean_y]);

    let mut rng = Rng::new(crate::numerics::derive_seed(cfg.seed, u64::MAX));
    let mut head_state = AdamState::new(cm.regressor.params.len());
    let mut enc_states: Vec<AdamState> = cm
        .blocks
        .iter()
        .map(|b| AdamState::new(b.autoencoder.encoder.params.len()))
        .collect();
    let mut curves = LossCurves {
        train: vec![combined_loss(cm, &tr, &y_tr)?],
        validation: vec![combined_loss(cm, &va, &y_va)?],
        best_epoch: 0,
    };
    let mut stopper = EarlyStopping::new(curves.validation[0], cfg.patience);
    let mut best = cm.clone();
    for epoch in 1..=cfg.max_epochs {
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let xb: Vec<Matrix> = tr.iter().map(|x| x.select_rows(&batch)).collect();
            let yb = y_tr.select_rows(&batch);
            let enc_acts = cm
                .blocks
                .iter()
                .zip(&xb)
                .map(|(b, x)| forward(&b.autoencoder.encoder, x))
                .collect::<Result<Vec<_>>>()?;
            let z = Matrix::hstack(&enc_acts.iter().map(|a| a.last().expect("non-empty")).collect::<Vec<_>>())?;
            let head_acts = forward(&cm.regressor, &z)?;
            let (_, d_out) = mse_loss(head_acts.last().expect("non-empty"), &yb)?;
            let (g_head, d_z) = backward(&cm.regressor, &head_acts, &d_out)?;
            if cfg.fine_tune_encoders {
                let mut offset = 0;
                for (i, block) in cm.blocks.iter_mut().enumerate() {
                    let k = block.autoencoder.latent_width();
                    let cols: Vec<usize> = (offset..offset + k).collect();
                    offset += k;
                    let (g_enc, _) = backward(&block.autoencoder.encoder, &enc_acts[i], &d_z.select_columns(&cols))?;
                    adam_step(&mut block.autoencoder.encoder.params, &g_enc, &mut enc_states[i], cfg.learning_rate)?;
                }
            }
            adam_step(&mut cm.regressor.params, &g_head, &mut head_state, cfg.learning_rate)?;
        }
        curves.train.push(combined_loss(cm, &tr, &y_tr)?);
        let val_loss = combined_loss(cm, &va, &y_va)?;
        curves.validation.push(val_loss);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = cm.clone();
        }
        if stop {
            break;
        }
    }
    *cm = best;
    cm.fitted = true;
    curves.best_epoch = stopper.best_epoch;
    Ok(curves)
}

/// Pretraining followed by regressor training.
pub fn train_combined(cm: &mut CombinedModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<CombinedCurves> {
    cfg.validate()?;
    let pretrain = pretrain(cm, train, val, cfg)?;
    let regression = train_head(cm, train, val, cfg)?;
    Ok(CombinedCurves { pretrain, regression })
}

pub fn predict_combined(cm: &CombinedModel, dataset: &Dataset) -> Result<Vec<f64>> {
    if !cm.fitted {
        return Err(Error::State("combined model is not fitted".into()));
    }
    let z = encode(cm, dataset)?;
    let out = predict(&cm.regressor, &z)?.into_vec();
    Ok(match cm.clip {
        Some((lo, hi)) => out.into_iter().map(|v| v.clamp(lo, hi)).collect(),
        None => out,
    })
}

const CHECKPOINT_MAGIC: &str = "fuselab-combined-model v1";

fn write_mlp(out: &mut impl Write, name: &str, mlp: &Mlp) -> std::io::Result<()> {
    let widths: Vec<String> = mlp.widths.iter().map(|w| w.to_string()).collect();
    let acts: Vec<&str> = mlp.activations.iter().map(|a| a.tag()).collect();
    writeln!(out, "{name}\t{}\t{}", widths.join(","), acts.join(","))?;
    for p in &mlp.params {
        writeln!(out, "{:016x}", p.to_bits())?;
    }
    Ok(())
}

/// Text checkpoint; parameters are stored as IEEE-754 bit patterns so a
/// reload predicts bit-identically.
pub fn save_checkpoint(cm: &CombinedModel, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    match cm.clip {
        Some((lo, hi)) => writeln!(out, "clip\t{:016x}\t{:016x}", lo.to_bits(), hi.to_bits())?,
        None => writeln!(out, "clip\tnone")?,
    }
    writeln!(out, "fitted\t{}", u8::from(cm.fitted))?;
    writeln!(out, "blocks\t{}", cm.blocks.len())?;
    for b in &cm.blocks {
        writeln!(out, "block\t{}\t{}", b.autoencoder.modality.tag(), b.columns.join("\t"))?;
        write_mlp(out, "encoder", &b.autoencoder.encoder)?;
        write_mlp(out, "decoder", &b.autoencoder.decoder)?;
    }
    write_mlp(out, "regressor", &cm.regressor)
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: u64,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(self.error(&e.to_string())),
            None => Err(self.error("unexpected end of checkpoint")),
        }
    }

    fn error(&self, message: &str) -> Error {
        Error::Parse {
            file: "checkpoint".into(),
            line: self.line,
            message: message.into(),
        }
    }

    fn hex(&self, s: &str) -> Result<f64> {
        u64::from_str_radix(s.trim(), 16)
            .map(f64::from_bits)
            .map_err(|_| self.error(&format!("bad parameter `{s}`")))
    }

    fn mlp(&mut self, name: &str) -> Result<Mlp> {
        let header = self.next()?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 || fields[0] != name {
            return Err(self.error(&format!("expected `{name}` header")));
        }
        let widths = fields[1]
            .split(',')
            .map(|w| w.parse::<usize>().map_err(|_| self.error("bad width")))
            .collect::<Result<Vec<_>>>()?;
        let acts = fields[2]
            .split(',')
            .map(|a| a.parse::<Activation>().map_err(|_| self.error("bad activation")))
            .collect::<Result<Vec<_>>>()?;
        let n = param_count(&widths);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let l = self.next()?;
            params.push(self.hex(&l)?);
        }
        Mlp::from_params(&widths, &acts, params).map_err(|e| self.error(&e.to_string()))
    }
}

pub fn load_checkpoint(input: impl BufRead) -> Result<CombinedModel> {
    let mut lines = Lines {
        inner: input.lines(),
        line: 0,
    };
    if lines.next()? != CHECKPOINT_MAGIC {
        return Err(lines.error("not a combined-model checkpoint"));
    }
    let clip_line = lines.next()?;
    let clip = match clip_line.split('\t').collect::<Vec<_>>().as_slice() {
        ["clip", "none"] => None,
        ["clip", lo, hi] => Some((lines.hex(lo)?, lines.hex(hi)?)),
        _ => return Err(lines.error("bad clip line")),
    };
    let fitted = match lines.next()?.as_str() {
        "fitted\t1" => true,
        "fitted\t0" => false,
        _ => return Err(lines.error("bad fitted line")),
    };
    let count_line = lines.next()?;
    let count: usize = count_line
        .strip_prefix("blocks\t")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| lines.error("bad blocks line"))?;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let header = lines.next()?;
        let mut fields = header.split('\t');
        if fields.next() != Some("block") {
            return Err(lines.error("expected block header"));
        }
        let modality: Modality = fields
            .next()
            .ok_or_else(|| lines.error("missing modality"))?
            .parse()
            .map_err(|_| lines.error("bad modality"))?;
        let columns: Vec<String> = fields.map(str::to_string).collect();
        let encoder = lines.mlp("encoder")?;
        let decoder = lines.mlp("decoder")?;
        if encoder.input_width() != columns.len() || decoder.output_width() != columns.len() {
            return Err(lines.error("block widths do not match its columns"));
        }
        blocks.push(Block {
            autoencoder: Autoencoder { modality, encoder, decoder },
            columns,
        });
    }
    let regressor = lines.mlp("regressor")?;
    let latent_total: usize = blocks.iter().map(|b| b.autoencoder.latent_width()).sum();
    if regressor.input_width() != latent_total || regressor.output_width() != 1 {
        return Err(lines.error("regressor widths do not match the latent blocks"));
    }
    Ok(CombinedModel {
        blocks,
        regressor,
        clip,
        fitted,
    })
}

/// Seeded split of `0..n` into (train, validation) with `round(fraction * n)`
/// validation rows, both sorted.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut val = Rng::new(seed).sample_without_replacement(n, k);
    val.sort_unstable();
    let train = (0..n).filter(|i| val.binary_search(i).is_err()).collect();
    (train, val)
}
