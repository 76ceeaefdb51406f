use msl_tensor::{Binder, Graph, ParamStore, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::lambda::LambdaField;
use super::layers::{instance_norm, Cin, CondEmbedding, Conv, ConvT, LayerNorm, Linear};
use crate::error::{MslError, Result};
use crate::physics::{self, ImageGrid, KSpaceGrid, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ct,
    Mri,
}

/// Raw sensory data for one modality.
#[derive(Clone, Debug)]
pub enum Sensory<'a> {
    Sinogram(&'a Sinogram),
    KSpace(&'a KSpaceGrid),
}

/// Fixed slot order of the transformer token groups.
pub const SLOT_NAMES: [&str; 4] = ["intra_ct", "inter_ct2mri", "inter_mri2ct", "intra_mri"];

/// Transformer outputs by group. CT-derived groups exist iff CT input was
/// given, likewise for MRI.
#[derive(Clone, Debug, Default)]
pub struct TokenGroups {
    pub intra_ct: Option<Var>,
    pub inter_ct2mri: Option<Var>,
    pub inter_mri2ct: Option<Var>,
    pub intra_mri: Option<Var>,
    /// Attention probabilities per block and head, `[tokens, tokens]`.
    pub attention: Vec<Var>,
}

impl TokenGroups {
    pub fn slots(&self) -> [Option<Var>; 4] {
        [self.intra_ct, self.inter_ct2mri, self.inter_mri2ct, self.intra_mri]
    }

    /// Enhanced features `(f_enh_CT, f_enh_MRI)`. With a missing modality the
    /// inter-modality group of the other one stands in for it.
    pub fn enhanced<T: Real>(&self, g: &Graph<T>) -> Result<(Var, Var)> {
        let pair = |a: Option<Var>, b: Option<Var>| -> Result<Var> {
            match (a, b) {
                (Some(a), Some(b)) => Ok(g.add(a, b)?),
                (Some(a), None) | (None, Some(a)) => Ok(a),
                (None, None) => Err(MslError::MissingModality),
            }
        };
        Ok((
            pair(self.intra_ct, self.inter_mri2ct)?,
            pair(self.intra_mri, self.inter_ct2mri)?,
        ))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    c0: Conv,
    d1: Conv,
    d2: Conv,
    res: Vec<ResBlock>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (a, b, c) = cfg.encoder_channels();
        Self {
            c0: Conv::new(store, &format!("{name}.c0"), 1, a, 7, 1, 3, rng),
            d1: Conv::new(store, &format!("{name}.d1"), a, b, 4, 2, 1, rng),
            d2: Conv::new(store, &format!("{name}.d2"), b, c, 4, 2, 1, rng),
            res: (0..3)
                .map(|i| ResBlock {
                    c1: Conv::new(store, &format!("{name}.r{i}.c1"), c, c, 3, 1, 1, rng),
                    c2: Conv::new(store, &format!("{name}.r{i}.c2"), c, c, 3, 1, 1, rng),
                })
                .collect(),
        }
    }

    fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in [&self.c0, &self.d1, &self.d2] {
            h = g.relu(instance_norm(g, conv.apply(g, p, h)?)?)?;
        }
        for r in &self.res {
            let y = g.relu(instance_norm(g, r.c1.apply(g, p, h)?)?)?;
            let y = instance_norm(g, r.c2.apply(g, p, y)?)?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Transformer {
    proj: Linear,
    cls: msl_tensor::ParamId,
    pos: msl_tensor::ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
    heads: usize,
    group: usize,
}

impl Transformer {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let slots = 4 * cfg.tokens_per_group() + 1;
        let small = |store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            use rand::Rng;
            let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-0.02f32..0.02));
            store.insert(name, t)
        };
        let cls = small(store, "tf.cls", &[1, d], rng);
        let pos = small(store, "tf.pos", &[slots, d], rng);
        Self {
            proj: Linear::new(store, "tf.proj", cfg.token_dim(), d, rng),
            cls,
            pos,
            blocks: (0..2)
                .map(|i| {
                    let n = format!("tf.b{i}");
                    Block {
                        ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                        q: Linear::new(store, &format!("{n}.q"), d, d, rng),
                        k: Linear::new(store, &format!("{n}.k"), d, d, rng),
                        v: Linear::new(store, &format!("{n}.v"), d, d, rng),
                        o: Linear::new(store, &format!("{n}.o"), d, d, rng),
                        ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                        fc1: Linear::new(store, &format!("{n}.fc1"), d, cfg.mlp_dim(), rng),
                        fc2: Linear::new(store, &format!("{n}.fc2"), cfg.mlp_dim(), d, rng),
                    }
                })
                .collect(),
            ln_f: LayerNorm::new(store, "tf.ln_f", d),
            out: Linear::new(store, "tf.out", d, d, rng),
            heads: cfg.heads,
            group: cfg.tokens_per_group(),
        }
    }

    fn attention<T: Real>(
        &self,
        g: &Graph<T>,
        p: &mut Binder<T>,
        b: &Block,
        x: Var,
        probs: &mut Vec<Var>,
    ) -> Result<Var> {
        let (q, k, v) = (b.q.apply(g, p, x)?, b.k.apply(g, p, x)?, b.v.apply(g, p, x)?);
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(k, 1, h * dh, dh)?,
                    g.slice(v, 1, h * dh, dh)?,
                )
            };
            let scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale)?;
            let a = g.softmax(scores)?;
            probs.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        b.o.apply(g, p, cat)
    }

    /// Runs the cross-domain interaction on whichever modalities are present,
    /// concatenating groups in `order` (a permutation of slot indices).
    fn apply<T: Real>(
        &self,
        g: &Graph<T>,
        p: &mut Binder<T>,
        tokens_ct: Option<Var>,
        tokens_mri: Option<Var>,
        order: [usize; 4],
    ) -> Result<TokenGroups> {
        let mut seen = [false; 4];
        order.iter().for_each(|&s| seen[s.min(3)] = true);
        if order.iter().any(|&s| s > 3) || seen.contains(&false) {
            return Err(MslError::InvalidInput(format!(
                "slot order {order:?} is not a permutation"
            )));
        }
        if tokens_ct.is_none() && tokens_mri.is_none() {
            return Err(MslError::MissingModality);
        }
        let ct = tokens_ct.map(|t| self.proj.apply(g, p, t)).transpose()?;
        let mri = tokens_mri.map(|t| self.proj.apply(g, p, t)).transpose()?;
        let sources = [ct, ct, mri, mri];
        let pos = p.bind(g, self.pos);
        let mut parts = vec![p.bind(g, self.cls)];
        let mut pos_parts = vec![g.slice(pos, 0, 0, 1)?];
        let mut present = Vec::new();
        for slot in order {
            if let Some(t) = sources[slot] {
                parts.push(t);
                pos_parts.push(g.slice(pos, 0, 1 + slot * self.group, self.group)?);
                present.push(slot);
            }
        }
        let x = g.concat(&parts, 0)?;
        let mut x = g.add(x, g.concat(&pos_parts, 0)?)?;
        let mut attention = Vec::new();
        for b in &self.blocks {
            let n = b.ln1.apply(g, p, x)?;
            let a = self.attention(g, p, b, n, &mut attention)?;
            x = g.add(x, a)?;
            let n = b.ln2.apply(g, p, x)?;
            let m = b.fc1.apply(g, p, n)?;
            let m = b.fc2.apply(g, p, g.relu(m)?)?;
            x = g.add(x, m)?;
        }
        let n = self.ln_f.apply(g, p, x)?;
        let y = self.out.apply(g, p, n)?;
        let mut groups = TokenGroups {
            attention,
            ..Default::default()
        };
        for (i, &slot) in present.iter().enumerate() {
            let t = Some(g.slice(y, 0, 1 + i * self.group, self.group)?);
            match slot {
                0 => groups.intra_ct = t,
                1 => groups.inter_ct2mri = t,
                2 => groups.inter_mri2ct = t,
                _ => groups.intra_mri = t,
            }
        }
        Ok(groups)
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    u1: ConvT,
    u2: ConvT,
    dim: usize,
    grid: usize,
}

impl Fusion {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (a, b) = cfg.fusion_channels();
        Self {
            u1: ConvT::up2(store, "fuse.u1", cfg.model_dim, a, rng),
            u2: ConvT::up2(store, "fuse.u2", a, b, rng),
            dim: cfg.model_dim,
            grid: cfg.grid(),
        }
    }

    /// Token matrix `[G, D]` laid out on the `D x grid x grid` patch grid,
    /// then upsampled to feature resolution.
    fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, fused: Var) -> Result<Var> {
        let map = g.unpatchify(fused, self.dim, self.grid, self.grid, 1)?;
        let h = g.relu(instance_norm(g, self.u1.apply(g, p, map)?)?)?;
        Ok(g.relu(instance_norm(g, self.u2.apply(g, p, h)?)?)?)
    }
}

#[derive(Clone, Debug)]
struct CinResBlock {
    c1: Conv,
    n1: Cin,
    c2: Conv,
    n2: Cin,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    fs: CondEmbedding,
    res: Vec<CinResBlock>,
    u1: ConvT,
    n_u1: Cin,
    u2: ConvT,
    n_u2: Cin,
    out: Conv,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.fusion_channels().1;
        let (a, b) = cfg.decoder_channels();
        let e = cfg.cond_dim();
        Self {
            fs: CondEmbedding::new(store, "dec.fs", e, rng),
            res: (0..3)
                .map(|i| CinResBlock {
                    c1: Conv::new(store, &format!("dec.r{i}.c1"), c, c, 3, 1, 1, rng),
                    n1: Cin::new(store, &format!("dec.r{i}.n1"), c, e),
                    c2: Conv::new(store, &format!("dec.r{i}.c2"), c, c, 3, 1, 1, rng),
                    n2: Cin::new(store, &format!("dec.r{i}.n2"), c, e),
                })
                .collect(),
            u1: ConvT::up2(store, "dec.u1", c, a, rng),
            n_u1: Cin::new(store, "dec.u1.n", a, e),
            u2: ConvT::up2(store, "dec.u2", a, b, rng),
            n_u2: Cin::new(store, "dec.u2.n", b, e),
            out: Conv::new(store, "dec.out", b, 1, 7, 1, 3, rng),
        }
    }

    /// Conditional embedding of a `[1, h, w]` lambda map resized to the
    /// given resolution: `[E, h*w]`.
    fn embedding<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, lam: Var, h: usize, w: usize) -> Result<Var> {
        let shape = g.shape(lam);
        let m = if shape[1] == h && shape[2] == w {
            lam
        } else {
            g.resize_bilinear(lam, h, w)?
        };
        let row = g.reshape(m, &[1, h * w])?;
        self.fs.apply(g, p, row)
    }

    fn apply<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, rep: Var, lam: Var) -> Result<Var> {
        let mut cache: Vec<(usize, Var)> = Vec::new();
        let mut emb = |g: &Graph<T>, p: &mut Binder<T>, x: Var| -> Result<Var> {
            let s = g.shape(x);
            if let Some(&(_, e)) = cache.iter().find(|(h, _)| *h == s[1]) {
                return Ok(e);
            }
            let e = self.embedding(g, p, lam, s[1], s[2])?;
            cache.push((s[1], e));
            Ok(e)
        };
        let mut h = rep;
        for r in &self.res {
            let y = r.c1.apply(g, p, h)?;
            let s = emb(g, p, y)?;
            let y = g.relu(r.n1.apply(g, p, y, s)?)?;
            let y = r.c2.apply(g, p, y)?;
            let y = r.n2.apply(g, p, y, s)?;
            h = g.add(h, y)?;
        }
        for (u, n) in [(&self.u1, &self.n_u1), (&self.u2, &self.n_u2)] {
            let y = u.apply(g, p, h)?;
            let s = emb(g, p, y)?;
            h = g.relu(n.apply(g, p, y, s)?)?;
        }
        self.out.apply(g, p, h)
    }
}

/// Encoder images for one case: the analytic back-transforms of the
/// available sensory data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorImages {
    pub ct: Option<ImageGrid>,
    pub mri: Option<ImageGrid>,
}

impl SensorImages {
    /// FBP of the sinogram and zero-filled reconstruction of the k-space.
    pub fn from_sensors(sino: Option<&Sinogram>, kspace: Option<&KSpaceGrid>, size: usize) -> Result<Self> {
        Ok(Self {
            ct: sino.map(|s| physics::fbp(s, size)).transpose()?,
            mri: kspace.map(physics::zero_filled_recon).transpose()?,
        })
    }

    pub fn only(&self, modality: Modality) -> Self {
        match modality {
            Modality::Ct => Self {
                ct: self.ct.clone(),
                mri: None,
            },
            Modality::Mri => Self {
                ct: None,
                mri: self.mri.clone(),
            },
        }
    }
}

/// Graph handles of one forward pass up to the representation.
pub struct Encoded {
    pub f_ct: Option<Var>,
    pub f_mri: Option<Var>,
    pub groups: TokenGroups,
    pub rep: Var,
}

/// The multi-sensor learning network.
#[derive(Clone, Debug)]
pub struct MslModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    enc_ct: Encoder,
    enc_mri: Encoder,
    transformer: Transformer,
    fusion: Fusion,
    decoder: Decoder,
}

impl MslModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc_ct = Encoder::new(&mut params, "enc_ct", &config, &mut rng);
        let enc_mri = Encoder::new(&mut params, "enc_mri", &config, &mut rng);
        let transformer = Transformer::new(&mut params, &config, &mut rng);
        let fusion = Fusion::new(&mut params, &config, &mut rng);
        let decoder = Decoder::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            params,
            enc_ct,
            enc_mri,
            transformer,
            fusion,
            decoder,
        })
    }

    pub fn rep_size(&self) -> usize {
        self.config.rep_size()
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        let n = self.config.image_size;
        if img.height != n || img.width != n {
            return Err(MslError::InvalidInput(format!(
                "model expects {n}x{n} images, got {}x{}",
                img.height, img.width
            )));
        }
        Ok(())
    }

    /// Back-transform plus convolutional encoder for one modality.
    pub fn pi_encode<T: Real>(
        &self,
        g: &Graph<T>,
        p: &mut Binder<T>,
        modality: Modality,
        sensory: Sensory<'_>,
    ) -> Result<Var> {
        let img = match (modality, sensory) {
            (Modality::Ct, Sensory::Sinogram(s)) => physics::fbp(s, self.config.image_size)?,
            (Modality::Mri, Sensory::KSpace(k)) => physics::zero_filled_recon(k)?,
            (Modality::Ct, _) => return Err(MslError::ModalityMismatch("CT encoder needs a sinogram")),
            (Modality::Mri, _) => return Err(MslError::ModalityMismatch("MRI encoder needs k-space")),
        };
        self.check_image(&img)?;
        let x = g.constant(img.to_tensor().cast());
        self.encode(g, p, modality, x)
    }

    /// Convolutional encoder on a back-transformed `[1, N, N]` image.
    pub fn encode<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, modality: Modality, x: Var) -> Result<Var> {
        match modality {
            Modality::Ct => self.enc_ct.apply(g, p, x),
            Modality::Mri => self.enc_mri.apply(g, p, x),
        }
    }

    /// `[C, F, F]` feature map to `[G, C*p*p]` raster-ordered patch tokens.
    pub fn tokenize<T: Real>(&self, g: &Graph<T>, f: Var) -> Result<Var> {
        Ok(g.patchify(f, self.config.patch_size)?)
    }

    pub fn interact<T: Real>(
        &self,
        g: &Graph<T>,
        p: &mut Binder<T>,
        tokens_ct: Option<Var>,
        tokens_mri: Option<Var>,
    ) -> Result<TokenGroups> {
        self.transformer.apply(g, p, tokens_ct, tokens_mri, [0, 1, 2, 3])
    }

    /// [`MslModel::interact`] with the groups concatenated in another slot
    /// order; each group keeps its own position embeddings.
    pub fn interact_in_order<T: Real>(
        &self,
        g: &Graph<T>,
        p: &mut Binder<T>,
        tokens_ct: Option<Var>,
        tokens_mri: Option<Var>,
        order: [usize; 4],
    ) -> Result<TokenGroups> {
        self.transformer.apply(g, p, tokens_ct, tokens_mri, order)
    }

    /// `UP(f_enh_CT + f_enh_MRI)`.
    pub fn compose<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, groups: &TokenGroups) -> Result<Var> {
        let (ct, mri) = groups.enhanced(g)?;
        self.fusion.apply(g, p, g.add(ct, mri)?)
    }

    /// Decoder with a `[1, R, R]` lambda map at representation resolution.
    pub fn decode_var<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, rep: Var, lam: Var) -> Result<Var> {
        let r = self.rep_size();
        if g.shape(lam) != [1, r, r] {
            return Err(MslError::InvalidInput(format!(
                "lambda map must be [1, {r}, {r}], got {:?}",
                g.shape(lam)
            )));
        }
        self.decoder.apply(g, p, rep, lam)
    }

    /// Constant lambda map node.
    pub fn lambda_var<T: Real>(&self, g: &Graph<T>, lam: &LambdaField) -> Result<Var> {
        Ok(g.constant(lam.to_map(self.rep_size())?.cast()))
    }

    /// Encoders, transformer and fusion for the given back-transformed images.
    pub fn encode_all<T: Real>(&self, g: &Graph<T>, p: &mut Binder<T>, input: &SensorImages) -> Result<Encoded> {
        if input.ct.is_none() && input.mri.is_none() {
            return Err(MslError::MissingModality);
        }
        let mut feat = |img: &Option<ImageGrid>, m: Modality| -> Result<Option<Var>> {
            img.as_ref()
                .map(|img| {
                    self.check_image(img)?;
                    let x = g.constant(img.to_tensor().cast());
                    self.encode(g, p, m, x)
                })
                .transpose()
        };
        let f_ct = feat(&input.ct, Modality::Ct)?;
        let f_mri = feat(&input.mri, Modality::Mri)?;
        let t_ct = f_ct.map(|f| self.tokenize(g, f)).transpose()?;
        let t_mri = f_mri.map(|f| self.tokenize(g, f)).transpose()?;
        let groups = self.interact(g, p, t_ct, t_mri)?;
        let rep = self.compose(g, p, &groups)?;
        Ok(Encoded {
            f_ct,
            f_mri,
            groups,
            rep,
        })
    }

    /// Multi-sensor representation `[C, R, R]`, computed once per case.
    pub fn representation(&self, input: &SensorImages) -> Result<Tensor<f32>> {
        let g = Graph::<f32>::new();
        let mut p = Binder::frozen(&self.params);
        let enc = self.encode_all(&g, &mut p, input)?;
        let rep = g.value(enc.rep).clone();
        Ok(rep)
    }

    /// Decodes a stored representation at the given lambda.
    pub fn decode(&self, rep: &Tensor<f32>, lam: &LambdaField) -> Result<ImageGrid> {
        let g = Graph::<f32>::new();
        let mut p = Binder::frozen(&self.params);
        let r = g.constant(rep.clone());
        let l = self.lambda_var(&g, lam)?;
        let y = self.decode_var(&g, &mut p, r, l)?;
        let out = ImageGrid::from_tensor(&g.value(y))?;
        Ok(out)
    }

    pub fn forward(&self, input: &SensorImages, lam: &LambdaField) -> Result<ImageGrid> {
        lam.validate()?;
        let rep = self.representation(input)?;
        self.decode(&rep, lam)
    }

    /// Forward from raw sensory data.
    pub fn forward_sensors(
        &self,
        sino: Option<&Sinogram>,
        kspace: Option<&KSpaceGrid>,
        lam: &LambdaField,
    ) -> Result<ImageGrid> {
        let input = SensorImages::from_sensors(sino, kspace, self.config.image_size)?;
        self.forward(&input, lam)
    }

    /// Per-group mean token vectors (length `model_dim`) for present groups.
    pub fn group_features(&self, input: &SensorImages) -> Result<Vec<(&'static str, Vec<f32>)>> {
        let g = Graph::<f32>::new();
        let mut p = Binder::frozen(&self.params);
        let enc = self.encode_all(&g, &mut p, input)?;
        let mut out = Vec::new();
        for (name, slot) in SLOT_NAMES.iter().zip(enc.groups.slots()) {
            if let Some(v) = slot {
                let t = g.value(v);
                let d = t.shape()[1];
                let n = t.shape()[0] as f64;
                let mut mean = vec![0.0f64; d];
                for row in t.data().chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x as f64);
                }
                out.push((*name, mean.iter().map(|m| (m / n) as f32).collect()));
            }
        }
        Ok(out)
    }
}
