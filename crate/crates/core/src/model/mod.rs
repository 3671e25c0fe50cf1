//! The end-to-end nowcasting network.
//!
//! Radar frames are channel-stacked and encoded to a hidden feature map;
//! covariates, resampled onto the forecast times and the hidden grid, are
//! embedded by a 1×1 projection. In the frequency domain the hidden
//! spectrum is modulated by the covariate spectrum, phase-aligned against
//! the frequency memory, and passed through `depth_l` blocks of
//! frequency attention and residual AFNO mixing before decoding to `k_out`
//! frames in `[0, 1]`.

mod config;
pub mod regrid;

pub use config::{FusionPlacement, ModelConfig, ModulesEnabled};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::afno::{afno_var, AfnoVars, AfnoWeights};
use crate::autodiff::kernels;
use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::ifa::{freq_attention_var, ifa_var, FrequencyAttention, HighFreqGate, GATE_INIT};
use crate::memory::{mem_encode_var, memory_match_var, phase_align_var, MemEncoder, MemoryBank, TrainingPhase, MEM_ENCODER_LAST, PHASE_ALIGN_EPS};
use crate::nets::{conv_stack_var, decoder_specs, encoder_specs, Activation, ConvStack, LayerSpec};
use crate::pfm::{pfm_var, PfmParams};
use crate::sequence::{CovariateGrid, RadarSequence, COVARIATE_CHANNELS};
use crate::spectral::{ComplexSpectrum, RealField, SpectrumShape};
use crate::tensor::Tensor;

/// Cadence assumed when a single input frame leaves it undetermined.
pub const DEFAULT_CADENCE_MIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AfnoIds {
    w1: ParamId,
    b1: Option<ParamId>,
    w2: ParamId,
    b2: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StackIds {
    w: Vec<ParamId>,
    b: Vec<ParamId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MemIds {
    slots: ParamId,
    enc: StackIds,
    align: AfnoIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIds {
    attn: ParamId,
    gate: Option<ParamId>,
    afno: AfnoIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    enc: StackIds,
    cov_w: ParamId,
    cov_b: ParamId,
    beta: Option<ParamId>,
    mem: Option<MemIds>,
    blocks: Vec<BlockIds>,
    dec: StackIds,
}

/// Which query fed the memory in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPath {
    /// Observed plus future frames (training phase 1).
    GroundTruth,
    /// Observed frames through the channel alignment (phase 2 and inference).
    Input,
    /// Memory disabled.
    Off,
}

/// Tape handles produced by [`NowcastModel::forward_var`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `(H, W, K)`, one channel per predicted frame.
    pub pred: Var,
    pub query_path: QueryPath,
    /// Slot attention `(H_f·W_f, S)` when the memory is active.
    pub alpha: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NowcastModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
    enc_specs: Vec<LayerSpec>,
    dec_specs: Vec<LayerSpec>,
    mem_specs: Vec<LayerSpec>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

fn insert_stack(p: &mut ParamSet, prefix: &str, specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<StackIds> {
    let mut ids = StackIds { w: vec![], b: vec![] };
    for (i, s) in specs.iter().enumerate() {
        let (w, b) = s.init(rng);
        ids.w.push(p.insert(format!("{prefix}.{i}.w"), w)?);
        ids.b.push(p.insert(format!("{prefix}.{i}.b"), b)?);
    }
    Ok(ids)
}

fn insert_afno(p: &mut ParamSet, prefix: &str, w: &AfnoWeights) -> Result<AfnoIds> {
    let mut ids = AfnoIds {
        w1: ParamId(0),
        b1: None,
        w2: ParamId(0),
        b2: None,
    };
    for (name, t) in w.to_tensors() {
        let id = p.insert(format!("{prefix}.{name}"), t)?;
        match name {
            "w1" => ids.w1 = id,
            "b1" => ids.b1 = Some(id),
            "w2" => ids.w2 = id,
            _ => ids.b2 = Some(id),
        }
    }
    Ok(ids)
}

impl NowcastModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.c_emb;
        let ch = c * config.mlp_ratio;
        let enc_specs = encoder_specs(config.t_in, config.enc_channels, c, config.down_log2())?;
        let dec_specs = decoder_specs(c, config.enc_channels, config.k_out, config.down_log2())?;
        let mem_specs = encoder_specs(1, config.enc_channels, c, config.down_log2())?;
        let hs = Self::spectrum_shape_for(&config);
        let mut p = ParamSet::new();

        let enc = insert_stack(&mut p, "enc", &enc_specs, &mut rng)?;
        let km = config.k_out * COVARIATE_CHANNELS;
        let cov_w = p.insert("cov.w", normal(&mut rng, &[km, c], (1.0 / km as f64).sqrt()))?;
        let cov_b = p.insert("cov.b", Tensor::zeros(&[c]))?;
        let beta = if config.modules.pfm {
            Some(p.insert("pfm.beta_logit", Tensor::zeros(&[1]))?)
        } else {
            None
        };
        let mem = if config.modules.fm {
            let bank = MemoryBank::random(&mut rng, config.memory_slots, c)?;
            let slots = p.insert("mem.slots", bank.to_tensor())?;
            let enc = insert_stack(&mut p, "mem_enc", &mem_specs, &mut rng)?;
            let aw = AfnoWeights::random(&mut rng, c, ch, c, config.n_blocks, config.afno_bias)?;
            let align = insert_afno(&mut p, "align", &aw)?;
            Some(MemIds { slots, enc, align })
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.depth_l);
        for l in 0..config.depth_l {
            let fa = FrequencyAttention::near_identity(&mut rng, hs);
            let attn = p.insert(format!("block{l}.attn"), fa.weights.to_tensor())?;
            let gate = if config.modules.ifa {
                Some(p.insert(format!("block{l}.gate"), Tensor::full(&[c], GATE_INIT))?)
            } else {
                None
            };
            let aw = AfnoWeights::random(&mut rng, c, ch, c, config.n_blocks, config.afno_bias)?;
            let afno = insert_afno(&mut p, &format!("block{l}.afno"), &aw)?;
            blocks.push(BlockIds { attn, gate, afno });
        }
        let dec = insert_stack(&mut p, "dec", &dec_specs, &mut rng)?;
        Ok(NowcastModel {
            config,
            params: p,
            layout: Layout {
                enc,
                cov_w,
                cov_b,
                beta,
                mem,
                blocks,
                dec,
            },
            enc_specs,
            dec_specs,
            mem_specs,
        })
    }

    /// Rebuild from stored parameters; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::CheckpointMismatch {
                key: "parameter count".into(),
                stored: params.len().to_string(),
                expected: m.params.len().to_string(),
            });
        }
        for ((_, want_name, want), (_, name, got)) in m.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(Error::CheckpointMismatch {
                    key: format!("parameter {want_name}"),
                    stored: format!("{name} {:?}", got.shape()),
                    expected: format!("{want_name} {:?}", want.shape()),
                });
            }
        }
        m.params = params;
        Ok(m)
    }

    fn spectrum_shape_for(c: &ModelConfig) -> SpectrumShape {
        SpectrumShape::half(c.hidden_hw, c.hidden_hw, c.c_emb)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Shape of the hidden half spectrum.
    pub fn spectrum_shape(&self) -> SpectrumShape {
        Self::spectrum_shape_for(&self.config)
    }

    /// Parameter holding the memory slots, if the memory is enabled.
    pub fn slots_id(&self) -> Option<ParamId> {
        self.layout.mem.as_ref().map(|m| m.slots)
    }

    /// Parameter names grouped by module, for gradient audits.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
        for (id, name, _) in self.params.iter() {
            let key = match name.split('.').next().unwrap_or(name) {
                k if k.starts_with("block") => format!("{k}.{}", name.split('.').nth(1).unwrap_or("")),
                k => k.to_string(),
            };
            match groups.iter_mut().find(|(g, _)| *g == key) {
                Some((_, v)) => v.push(id),
                None => groups.push((key, vec![id])),
            }
        }
        groups
    }

    fn stack(&self, specs: &[LayerSpec], ids: &StackIds, last: Activation) -> Result<ConvStack> {
        ConvStack::new(
            specs.to_vec(),
            ids.w.iter().map(|&i| self.params.get(i).clone()).collect(),
            ids.b.iter().map(|&i| self.params.get(i).clone()).collect(),
            last,
        )
    }

    fn afno(&self, ids: &AfnoIds) -> Result<AfnoWeights> {
        AfnoWeights::from_tensors(
            self.params.get(ids.w1),
            ids.b1.map(|i| self.params.get(i)),
            self.params.get(ids.w2),
            ids.b2.map(|i| self.params.get(i)),
        )
    }

    fn block(&self, l: usize) -> Result<&BlockIds> {
        self.layout
            .blocks
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("block {l} out of range (depth {})", self.config.depth_l)))
    }

    fn fm_ids(&self) -> Result<&MemIds> {
        self.layout
            .mem
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("frequency memory is disabled".into()))
    }

    pub fn encoder_stack(&self) -> Result<ConvStack> {
        self.stack(&self.enc_specs, &self.layout.enc, Activation::Identity)
    }

    pub fn decoder_stack(&self) -> Result<ConvStack> {
        self.stack(&self.dec_specs, &self.layout.dec, Activation::Sigmoid)
    }

    pub fn afno_weights(&self, l: usize) -> Result<AfnoWeights> {
        self.afno(&self.block(l)?.afno)
    }

    pub fn frequency_attention(&self, l: usize) -> Result<FrequencyAttention> {
        let weights = ComplexSpectrum::from_tensor(self.spectrum_shape(), self.params.get(self.block(l)?.attn))?;
        Ok(FrequencyAttention { weights })
    }

    /// Gate of block `l`, or `None` when IFA is disabled.
    pub fn gate(&self, l: usize) -> Result<Option<HighFreqGate>> {
        self.block(l)?
            .gate
            .map(|g| HighFreqGate::new(self.params.get(g).data().to_vec()))
            .transpose()
    }

    pub fn pfm_params(&self) -> Option<PfmParams> {
        self.layout.beta.map(|b| PfmParams {
            beta_logit: self.params.get(b).data()[0],
        })
    }

    pub fn memory_bank(&self) -> Result<MemoryBank> {
        MemoryBank::from_tensor_normalized(self.params.get(self.fm_ids()?.slots))
    }

    pub fn mem_encoder(&self) -> Result<MemEncoder> {
        let ids = self.fm_ids()?;
        MemEncoder::new(self.stack(&self.mem_specs, &ids.enc, MEM_ENCODER_LAST)?, self.config.t_in, self.config.k_out)
    }

    pub fn align_weights(&self) -> Result<AfnoWeights> {
        self.afno(&self.fm_ids()?.align)
    }

    /// Channel-stacked frames through the radar encoder: `(H_emb, W_emb, C_emb)`.
    pub fn encode(&self, seq: &RadarSequence) -> Result<RealField> {
        self.check_frames(seq, self.config.t_in, "encode")?;
        self.encoder_stack()?.apply(&seq.to_channels())
    }

    /// Linear 1×1 embedding of aligned covariates `(K, M, H_emb, W_emb)`.
    pub fn embed_covariates(&self, aligned: &Tensor) -> Result<RealField> {
        let x = self.stack_covariates(aligned)?;
        let (n, km) = (x.shape()[0], x.shape()[1]);
        let c = self.config.c_emb;
        let mut y = kernels::matmul(x.data(), self.params.get(self.layout.cov_w).data(), n, km, c, false);
        let b = self.params.get(self.layout.cov_b).data();
        for (i, v) in y.iter_mut().enumerate() {
            *v += b[i % c];
        }
        RealField::new(self.config.hidden_hw, self.config.hidden_hw, c, y)
    }

    /// `(K, M, h, w)` → `(h·w, K·M)` with time-major channel order.
    fn stack_covariates(&self, aligned: &Tensor) -> Result<Tensor> {
        let hh = self.config.hidden_hw;
        let want = [self.config.k_out, COVARIATE_CHANNELS, hh, hh];
        if aligned.shape() != want {
            return Err(Error::shape("aligned covariates", &want, aligned.shape()));
        }
        let km = self.config.k_out * COVARIATE_CHANNELS;
        let plane = hh * hh;
        let mut out = vec![0.0; plane * km];
        for (j, chunk) in aligned.data().chunks_exact(plane).enumerate() {
            for (p, &v) in chunk.iter().enumerate() {
                out[p * km + j] = v;
            }
        }
        Tensor::new(vec![plane, km], out)
    }

    fn check_frames(&self, seq: &RadarSequence, n: usize, what: &'static str) -> Result<()> {
        if seq.len() != n {
            return Err(Error::SequenceLength {
                what,
                expected: vec![n],
                actual: seq.len(),
            });
        }
        let hw = self.config.hw;
        if seq.hw() != (hw, hw) {
            return Err(Error::shape(what, &[hw, hw], &[seq.hw().0, seq.hw().1]));
        }
        Ok(())
    }

    /// Valid times of the `k_out` predicted frames.
    pub fn forecast_times(&self, input: &RadarSequence) -> Vec<f64> {
        let dt = input.cadence().unwrap_or(DEFAULT_CADENCE_MIN);
        let last = input.timestamps().last().copied().unwrap_or(0.0);
        (1..=self.config.k_out).map(|k| last + dt * k as f64).collect()
    }

    /// Covariates resampled to the forecast times and hidden grid, z-scored.
    pub fn align_covariates(&self, input: &RadarSequence, cov: &CovariateGrid) -> Result<Tensor> {
        let hh = self.config.hidden_hw;
        regrid::regrid(cov, &self.forecast_times(input), (hh, hh))
    }

    /// Record the hidden spectral stack on `t`; `h` and `cov_emb` are
    /// `(H_emb, W_emb, C_emb)`, `query` is the memory query spectrum.
    pub fn hidden_var(&self, t: &mut Tape, vars: &[Var], h: Var, cov_emb: Var, query: Option<Var>) -> Result<Var> {
        let v = |id: ParamId| vars[id.index()];
        let afno_vars = |ids: &AfnoIds| AfnoVars {
            w1: v(ids.w1),
            b1: ids.b1.map(v),
            w2: v(ids.w2),
            b2: ids.b2.map(v),
        };
        let mut f = t.rfft2(h)?;
        let f_met = match self.layout.beta {
            Some(_) => Some(t.rfft2(cov_emb)?),
            None => None,
        };
        let f_match = match (&self.layout.mem, query) {
            (Some(m), Some(q)) => Some(memory_match_var(t, q, v(m.slots))?.0),
            (Some(_), None) => return Err(Error::InvalidArgument("memory is enabled but no query was given".into())),
            (None, _) => None,
        };
        let fuse = |t: &mut Tape, mut f: Var| -> Result<Var> {
            if let (Some(b), Some(fm)) = (self.layout.beta, f_met) {
                f = pfm_var(t, f, fm, v(b), self.config.alignment_mode)?;
            }
            if let Some(m) = f_match {
                f = phase_align_var(t, f, m, PHASE_ALIGN_EPS)?;
            }
            Ok(f)
        };
        if self.config.fusion_placement == FusionPlacement::Once {
            f = fuse(t, f)?;
        }
        for b in &self.layout.blocks {
            if self.config.fusion_placement == FusionPlacement::PerBlock {
                f = fuse(t, f)?;
            }
            f = match b.gate {
                Some(g) => ifa_var(t, f, v(b.attn), v(g))?,
                None => freq_attention_var(t, f, v(b.attn))?,
            };
            let mixed = afno_var(t, f, &afno_vars(&b.afno))?;
            f = t.add(f, mixed)?;
        }
        t.irfft2(f, self.config.hidden_hw)
    }

    /// Record a full forward pass. In phase 1 `future` must hold the
    /// `k_out` target frames, which join the input to form the memory query.
    pub fn forward_var(
        &self,
        t: &mut Tape,
        vars: &[Var],
        input: &RadarSequence,
        cov_aligned: &Tensor,
        phase: TrainingPhase,
        future: Option<&RadarSequence>,
    ) -> Result<ForwardOutput> {
        self.check_frames(input, self.config.t_in, "forward input")?;
        let v = |id: ParamId| vars[id.index()];
        let x = t.constant(input.to_channels().to_tensor());
        let ew: Vec<Var> = self.layout.enc.w.iter().map(|&i| v(i)).collect();
        let eb: Vec<Var> = self.layout.enc.b.iter().map(|&i| v(i)).collect();
        let h = conv_stack_var(t, x, &self.enc_specs, &ew, &eb, Activation::Identity)?;

        let hh = self.config.hidden_hw;
        let cov = t.constant(self.stack_covariates(cov_aligned)?);
        let e = t.matmul(cov, v(self.layout.cov_w), false)?;
        let e = t.add_bcast(e, v(self.layout.cov_b), 1)?;
        let cov_emb = t.reshape(e, &[hh, hh, self.config.c_emb])?;

        let (query, query_path) = match &self.layout.mem {
            None => (None, QueryPath::Off),
            Some(m) => {
                let frame_vars = |t: &mut Tape, s: &RadarSequence| -> Result<Vec<Var>> {
                    let (fh, fw) = s.hw();
                    (0..s.len())
                        .map(|i| Ok(t.constant(Tensor::new(vec![fh, fw, 1], s.frame(i).to_vec())?)))
                        .collect()
                };
                let enc = self.mem_encoder()?;
                let mw: Vec<Var> = m.enc.w.iter().map(|&i| v(i)).collect();
                let mb: Vec<Var> = m.enc.b.iter().map(|&i| v(i)).collect();
                match phase {
                    TrainingPhase::One => {
                        let fut = future.ok_or_else(|| Error::InvalidArgument("phase 1 needs the target frames for the memory query".into()))?;
                        self.check_frames(fut, self.config.k_out, "phase-1 target frames")?;
                        let mut frames = frame_vars(t, input)?;
                        frames.extend(frame_vars(t, fut)?);
                        let feat = mem_encode_var(t, &frames, &enc, &mw, &mb)?;
                        (Some(t.rfft2(feat)?), QueryPath::GroundTruth)
                    }
                    TrainingPhase::Two => {
                        let frames = frame_vars(t, input)?;
                        let feat = mem_encode_var(t, &frames, &enc, &mw, &mb)?;
                        let spec = t.rfft2(feat)?;
                        let a = &m.align;
                        let av = AfnoVars {
                            w1: v(a.w1),
                            b1: a.b1.map(v),
                            w2: v(a.w2),
                            b2: a.b2.map(v),
                        };
                        (Some(afno_var(t, spec, &av)?), QueryPath::Input)
                    }
                }
            }
        };
        let alpha = match (&self.layout.mem, query) {
            (Some(m), Some(q)) => Some(memory_match_var(t, q, v(m.slots))?.1),
            _ => None,
        };
        let hid = self.hidden_var(t, vars, h, cov_emb, query)?;
        let dw: Vec<Var> = self.layout.dec.w.iter().map(|&i| v(i)).collect();
        let db: Vec<Var> = self.layout.dec.b.iter().map(|&i| v(i)).collect();
        let pred = conv_stack_var(t, hid, &self.dec_specs, &dw, &db, Activation::Sigmoid)?;
        Ok(ForwardOutput { pred, query_path, alpha })
    }

    /// Hidden stack on concrete inputs; `query` is required when the memory
    /// is enabled.
    pub fn hidden_forward(&self, h: &RealField, cov_emb: &RealField, query: Option<&ComplexSpectrum>) -> Result<RealField> {
        let mut t = Tape::new();
        let vars = t.bind(&self.params);
        let hv = t.constant(h.to_tensor());
        let cv = t.constant(cov_emb.to_tensor());
        let qv = query.map(|q| t.constant(q.to_tensor()));
        let y = self.hidden_var(&mut t, &vars, hv, cv, qv)?;
        RealField::from_tensor(t.value(y))
    }

    /// Predict `k_out` frames from the observed sequence and raw covariates,
    /// always through the observed-frame memory query.
    pub fn forward(&self, input: &RadarSequence, cov: &CovariateGrid) -> Result<RadarSequence> {
        let aligned = self.align_covariates(input, cov)?;
        Ok(self.forward_aligned(input, &aligned)?.0)
    }

    /// [`NowcastModel::forward`] on pre-aligned covariates, also reporting
    /// the memory query path.
    pub fn forward_aligned(&self, input: &RadarSequence, aligned: &Tensor) -> Result<(RadarSequence, QueryPath)> {
        let mut t = Tape::new();
        let vars = t.bind(&self.params);
        let out = self.forward_var(&mut t, &vars, input, aligned, TrainingPhase::Two, None)?;
        let field = RealField::from_tensor(t.value(out.pred))?;
        Ok((RadarSequence::from_channels(&field, self.forecast_times(input))?, out.query_path))
    }
}
