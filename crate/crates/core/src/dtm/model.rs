use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::loss::{self, LossBreakdown};
use super::nn::{
    dropout, dropout_backward, gelu, gelu_grad, positional_encoding, uniform_init, Attention,
    AttentionCache, DropMask, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear,
    Params,
};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};
use crate::timeseries::Matrix;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Input window length.
    pub w: usize,
    /// Forecast horizon.
    pub h: usize,
    pub d_features: usize,
}

impl ModelConfig {
    /// Vessel case-study defaults: d_model 64, 4 heads, d_ff 128, dropout 0.1.
    pub fn vessel(w: usize, h: usize, d_features: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            w,
            h,
            d_features,
        }
    }

    /// Mobile-robot defaults: as the vessel profile with dropout 0.2.
    pub fn robot(w: usize, h: usize, d_features: usize) -> Self {
        Self {
            dropout: 0.2,
            ..Self::vessel(w, h, d_features)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("w", self.w),
            ("h", self.h),
            ("d_features", self.d_features),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

struct EncoderCache {
    attn: AttentionCache,
    drop1: DropMask,
    norm1: LayerNormCache,
    ff: FeedForwardCache,
    drop2: DropMask,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    fn new(cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        Self {
            attn: Attention::new(cfg.d_model, cfg.n_heads, rng),
            norm1: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
            norm2: LayerNorm::new(cfg.d_model),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            attn: self.attn.zeros_like(),
            norm1: self.norm1.zeros_like(),
            ff: self.ff.zeros_like(),
            norm2: self.norm2.zeros_like(),
        }
    }

    fn forward(
        &self,
        x: &Matrix,
        p: f64,
        mut rng: Option<&mut StreamRng>,
    ) -> (Matrix, EncoderCache) {
        let (a, attn) = self.attn.forward(x, x);
        let (a, drop1) = dropout(a, p, rng.as_deref_mut());
        let (x1, norm1) = self.norm1.forward(&(a + x));
        let (f, ff) = self.ff.forward(&x1, p, rng.as_deref_mut());
        let (f, drop2) = dropout(f, p, rng.as_deref_mut());
        let (out, norm2) = self.norm2.forward(&(f + &x1));
        let cache = EncoderCache {
            attn,
            drop1,
            norm1,
            ff,
            drop2,
            norm2,
        };
        (out, cache)
    }

    fn backward(&self, c: &EncoderCache, dout: &Matrix, g: &mut EncoderLayer) -> Matrix {
        let dr2 = self.norm2.backward(&c.norm2, dout, &mut g.norm2);
        let df = dropout_backward(dr2.clone(), &c.drop2);
        let dx1 = dr2 + self.ff.backward(&c.ff, &df, &mut g.ff);
        let dr1 = self.norm1.backward(&c.norm1, &dx1, &mut g.norm1);
        let da = dropout_backward(dr1.clone(), &c.drop1);
        let (dq, dkv) = self.attn.backward(&c.attn, &da, &mut g.attn);
        dr1 + dq + dkv
    }
}

impl Params for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.attn.visit(&format!("{prefix}.attn"), out);
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        self.ff.visit(&format!("{prefix}.ff"), out);
        self.norm2.visit(&format!("{prefix}.norm2"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.attn.visit_mut(out);
        self.norm1.visit_mut(out);
        self.ff.visit_mut(out);
        self.norm2.visit_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

struct DecoderCache {
    self_attn: AttentionCache,
    drop1: DropMask,
    norm1: LayerNormCache,
    cross_attn: AttentionCache,
    drop2: DropMask,
    norm2: LayerNormCache,
    ff: FeedForwardCache,
    drop3: DropMask,
    norm3: LayerNormCache,
}

impl DecoderLayer {
    fn new(cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        Self {
            self_attn: Attention::new(cfg.d_model, cfg.n_heads, rng),
            norm1: LayerNorm::new(cfg.d_model),
            cross_attn: Attention::new(cfg.d_model, cfg.n_heads, rng),
            norm2: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
            norm3: LayerNorm::new(cfg.d_model),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            self_attn: self.self_attn.zeros_like(),
            norm1: self.norm1.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            norm2: self.norm2.zeros_like(),
            ff: self.ff.zeros_like(),
            norm3: self.norm3.zeros_like(),
        }
    }

    fn forward(
        &self,
        x: &Matrix,
        memory: &Matrix,
        p: f64,
        mut rng: Option<&mut StreamRng>,
    ) -> (Matrix, DecoderCache) {
        let (a, self_attn) = self.self_attn.forward(x, x);
        let (a, drop1) = dropout(a, p, rng.as_deref_mut());
        let (x1, norm1) = self.norm1.forward(&(a + x));
        let (c, cross_attn) = self.cross_attn.forward(&x1, memory);
        let (c, drop2) = dropout(c, p, rng.as_deref_mut());
        let (x2, norm2) = self.norm2.forward(&(c + &x1));
        let (f, ff) = self.ff.forward(&x2, p, rng.as_deref_mut());
        let (f, drop3) = dropout(f, p, rng.as_deref_mut());
        let (out, norm3) = self.norm3.forward(&(f + &x2));
        let cache = DecoderCache {
            self_attn,
            drop1,
            norm1,
            cross_attn,
            drop2,
            norm2,
            ff,
            drop3,
            norm3,
        };
        (out, cache)
    }

    /// Returns `(dL/dx, dL/dmemory)`.
    fn backward(&self, c: &DecoderCache, dout: &Matrix, g: &mut DecoderLayer) -> (Matrix, Matrix) {
        let dr3 = self.norm3.backward(&c.norm3, dout, &mut g.norm3);
        let df = dropout_backward(dr3.clone(), &c.drop3);
        let dx2 = dr3 + self.ff.backward(&c.ff, &df, &mut g.ff);
        let dr2 = self.norm2.backward(&c.norm2, &dx2, &mut g.norm2);
        let dc = dropout_backward(dr2.clone(), &c.drop2);
        let (dq, dmem) = self
            .cross_attn
            .backward(&c.cross_attn, &dc, &mut g.cross_attn);
        let dx1 = dr2 + dq;
        let dr1 = self.norm1.backward(&c.norm1, &dx1, &mut g.norm1);
        let da = dropout_backward(dr1.clone(), &c.drop1);
        let (dq, dkv) = self.self_attn.backward(&c.self_attn, &da, &mut g.self_attn);
        (dr1 + dq + dkv, dmem)
    }
}

impl Params for DecoderLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), out);
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), out);
        self.norm2.visit(&format!("{prefix}.norm2"), out);
        self.ff.visit(&format!("{prefix}.ff"), out);
        self.norm3.visit(&format!("{prefix}.norm3"), out);
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.self_attn.visit_mut(out);
        self.norm1.visit_mut(out);
        self.cross_attn.visit_mut(out);
        self.norm2.visit_mut(out);
        self.ff.visit_mut(out);
        self.norm3.visit_mut(out);
    }
}

/// Dropout behaviour of a forward pass.
pub enum Mode<'a> {
    /// Dropout disabled; output is a pure function of the input.
    Eval,
    /// Dropout enabled for training, masks drawn from the given stream.
    Train(&'a mut StreamRng),
    /// Dropout enabled at inference (Monte-Carlo dropout).
    Mc(&'a mut StreamRng),
}

impl<'a> Mode<'a> {
    fn rng(self) -> Option<&'a mut StreamRng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) | Mode::Mc(r) => Some(r),
        }
    }
}

/// Output of the two parallel heads, both `h x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub forecast: Matrix,
    pub recon: Matrix,
}

/// Encoder-decoder transformer with a linear forecast head and an MLP
/// reconstruction head on the decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct DtModel {
    config: ModelConfig,
    pub input: Linear,
    /// Learned decoder query embeddings, one row per horizon step.
    pub queries: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub forecast_head: Linear,
    pub recon_hidden: Linear,
    pub recon_out: Linear,
}

pub(crate) struct ForwardCache {
    x: Matrix,
    drop_in: DropMask,
    encoder: Vec<EncoderCache>,
    drop_q: DropMask,
    decoder: Vec<DecoderCache>,
    hidden: Matrix,
    recon_pre: Matrix,
    recon_act: Matrix,
}

impl DtModel {
    /// Builds a freshly initialized model. Weights are drawn uniformly in
    /// `+-1/sqrt(fan_in)` from a stream derived from `seed`; biases start at
    /// zero and layer norms at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", &[]);
        let c = &config;
        let input = Linear::new(c.d_features, c.d_model, &mut rng);
        let queries = uniform_init(c.h, c.d_model, 1.0 / (c.d_model as f64).sqrt(), &mut rng);
        let encoder = (0..c.n_encoder_layers)
            .map(|_| EncoderLayer::new(c, &mut rng))
            .collect();
        let decoder = (0..c.n_decoder_layers)
            .map(|_| DecoderLayer::new(c, &mut rng))
            .collect();
        let forecast_head = Linear::new(c.d_model, c.d_features, &mut rng);
        let recon_hidden = Linear::new(c.d_model, c.d_ff, &mut rng);
        let recon_out = Linear::new(c.d_ff, c.d_features, &mut rng);
        Ok(Self {
            config,
            input,
            queries,
            encoder,
            decoder,
            forecast_head,
            recon_hidden,
            recon_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// A model of identical shape with every parameter set to zero; used as
    /// gradient and optimizer-moment storage.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            input: self.input.zeros_like(),
            queries: Array2::zeros(self.queries.raw_dim()),
            encoder: self.encoder.iter().map(EncoderLayer::zeros_like).collect(),
            decoder: self.decoder.iter().map(DecoderLayer::zeros_like).collect(),
            forecast_head: self.forecast_head.zeros_like(),
            recon_hidden: self.recon_hidden.zeros_like(),
            recon_out: self.recon_out.zeros_like(),
        }
    }

    /// Named parameter tensors in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.input.visit("input", &mut out);
        out.push(("queries".to_string(), &self.queries));
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), &mut out);
        }
        self.forecast_head.visit("forecast_head", &mut out);
        self.recon_hidden.visit("recon_hidden", &mut out);
        self.recon_out.visit("recon_out", &mut out);
        out
    }

    /// Mutable parameter tensors, same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.input.visit_mut(&mut out);
        out.push(&mut self.queries);
        for l in &mut self.encoder {
            l.visit_mut(&mut out);
        }
        for l in &mut self.decoder {
            l.visit_mut(&mut out);
        }
        self.forecast_head.visit_mut(&mut out);
        self.recon_hidden.visit_mut(&mut out);
        self.recon_out.visit_mut(&mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let c = &self.config;
        if x.dim() != (c.w, c.d_features) {
            return Err(Error::shape(
                format!("input {}x{}", c.w, c.d_features),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input window contains non-finite values"));
        }
        Ok(())
    }

    /// Runs both heads on a `w x D` input window.
    pub fn forward(&self, x: &Matrix, mode: Mode<'_>) -> Result<Forward> {
        self.check_input(x)?;
        let (forecast, recon, _) = self.forward_cached(x, mode.rng());
        Ok(Forward { forecast, recon })
    }

    pub(crate) fn forward_cached(
        &self,
        x: &Matrix,
        mut rng: Option<&mut StreamRng>,
    ) -> (Matrix, Matrix, ForwardCache) {
        let c = &self.config;
        let p = c.dropout;
        let mut e = self.input.forward(x);
        e += &positional_encoding(0, c.w, c.d_model);
        let (mut e, drop_in) = dropout(e, p, rng.as_deref_mut());
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (out, cache) = layer.forward(&e, p, rng.as_deref_mut());
            e = out;
            encoder.push(cache);
        }
        let memory = e;

        // decoder queries sit at the future positions w..w+h
        let q = &self.queries + &positional_encoding(c.w, c.h, c.d_model);
        let (mut q, drop_q) = dropout(q, p, rng.as_deref_mut());
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (out, cache) = layer.forward(&q, &memory, p, rng.as_deref_mut());
            q = out;
            decoder.push(cache);
        }
        let hidden = q;

        let forecast = self.forecast_head.forward(&hidden);
        let recon_pre = self.recon_hidden.forward(&hidden);
        let recon_act = recon_pre.mapv(gelu);
        let recon = self.recon_out.forward(&recon_act);
        let cache = ForwardCache {
            x: x.clone(),
            drop_in,
            encoder,
            drop_q,
            decoder,
            hidden,
            recon_pre,
            recon_act,
        };
        (forecast, recon, cache)
    }

    /// Backpropagates head gradients through the network, accumulating into
    /// `grads`.
    pub(crate) fn backward(
        &self,
        c: &ForwardCache,
        d_forecast: &Matrix,
        d_recon: &Matrix,
        grads: &mut DtModel,
    ) {
        let mut dh = self
            .forecast_head
            .backward(&c.hidden, d_forecast, &mut grads.forecast_head);
        let mut d_act = self
            .recon_out
            .backward(&c.recon_act, d_recon, &mut grads.recon_out);
        d_act.zip_mut_with(&c.recon_pre, |d, &z| *d *= gelu_grad(z));
        dh += &self
            .recon_hidden
            .backward(&c.hidden, &d_act, &mut grads.recon_hidden);

        let mut dmem: Matrix = Array2::zeros((self.config.w, self.config.d_model));
        let mut dq = dh;
        for ((layer, cache), g) in self
            .decoder
            .iter()
            .zip(&c.decoder)
            .zip(grads.decoder.iter_mut())
            .rev()
        {
            let (dx, dm) = layer.backward(cache, &dq, g);
            dq = dx;
            dmem += &dm;
        }
        grads.queries += &dropout_backward(dq, &c.drop_q);

        let mut de = dmem;
        for ((layer, cache), g) in self
            .encoder
            .iter()
            .zip(&c.encoder)
            .zip(grads.encoder.iter_mut())
            .rev()
        {
            de = layer.backward(cache, &de, g);
        }
        let de = dropout_backward(de, &c.drop_in);
        self.input.backward(&c.x, &de, &mut grads.input);
    }

    /// Computes the combined loss on one window and accumulates its gradient
    /// into `grads`. When `detach_forecast` is set the forecast is treated as
    /// a constant target inside the reconstruction term.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        y: &Matrix,
        rng: Option<&mut StreamRng>,
        detach_forecast: bool,
        grads: &mut DtModel,
    ) -> Result<LossBreakdown> {
        self.check_input(x)?;
        let (forecast, recon, cache) = self.forward_cached(x, rng);
        let parts = LossBreakdown::new(
            loss::loss_forecast(&forecast, y)?,
            loss::loss_recon(&recon, &forecast)?,
        );
        let h = self.config.h as f64;
        let mut d_forecast = (&forecast - y) * (2.0 / h);
        let d_recon = (&recon - &forecast) * (2.0 / h);
        if !detach_forecast {
            d_forecast -= &d_recon;
        }
        self.backward(&cache, &d_forecast, &d_recon, grads);
        Ok(parts)
    }

    /// Loss on one window without gradients.
    pub fn loss(&self, x: &Matrix, y: &Matrix, mode: Mode<'_>) -> Result<LossBreakdown> {
        let out = self.forward(x, mode)?;
        Ok(LossBreakdown::new(
            loss::loss_forecast(&out.forecast, y)?,
            loss::loss_recon(&out.recon, &out.forecast)?,
        ))
    }
}
