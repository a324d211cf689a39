//! Network architectures: encoder q(c|x), decoder p(x|z), GAN generator and
//! discriminator, plus initialization and checkpoint serialization.
//!
//! All image tensors are N x 1 x 64 x 64 (NCHW). Conv stacks use 32-channel
//! 4x4 kernels with stride 2 and padding 1, so spatial extent halves per
//! layer: 64 -> 32 -> 16 -> 8 -> 4.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::dsprites::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::optim::Optimizer;
use crate::tensor::rng::SeededRng;
use crate::tensor::{concat, Gradients, Tape, Tensor};

pub const CONV_CHANNELS: usize = 32;
const CONV_KERNEL: usize = 4;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;
/// Flattened feature size after four stride-2 convs: 32 * 4 * 4.
const CONV_FEATURES: usize = CONV_CHANNELS * 4 * 4;
const HIDDEN: usize = 256;
/// Generator seed volume: 256 channels at 4x4.
const GEN_SEED_CHANNELS: usize = 256;
const GEN_SEED_FEATURES: usize = GEN_SEED_CHANNELS * 4 * 4;

pub const LOG_VAR_CLAMP: f32 = 10.0;
pub const DEFAULT_NOISE_DIM: usize = 16;

fn kaiming_uniform(rng: &mut SeededRng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    rng.uniform_tensor(dims, -bound, bound)
}

#[derive(Clone)]
struct ConvLayer {
    w: Tensor, // [oc, ic, k, k]
    b: Tensor, // [1, oc, 1, 1]
}

impl ConvLayer {
    fn new(rng: &mut SeededRng, ic: usize, oc: usize) -> ConvLayer {
        ConvLayer {
            w: kaiming_uniform(
                rng,
                &[oc, ic, CONV_KERNEL, CONV_KERNEL],
                ic * CONV_KERNEL * CONV_KERNEL,
            ),
            b: Tensor::zeros(&[1, oc, 1, 1]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, CONV_STRIDE, CONV_PAD)?;
        y.add(&self.b.broadcast_to(y.dims())?)
    }
}

#[derive(Clone)]
struct TConvLayer {
    w: Tensor, // [ic, oc, k, k]
    b: Tensor,
}

impl TConvLayer {
    fn new(rng: &mut SeededRng, ic: usize, oc: usize) -> TConvLayer {
        TConvLayer {
            w: kaiming_uniform(
                rng,
                &[ic, oc, CONV_KERNEL, CONV_KERNEL],
                ic * CONV_KERNEL * CONV_KERNEL,
            ),
            b: Tensor::zeros(&[1, oc, 1, 1]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.transpose_conv2d(&self.w, CONV_STRIDE, CONV_PAD)?;
        y.add(&self.b.broadcast_to(y.dims())?)
    }
}

#[derive(Clone)]
struct Dense {
    w: Tensor, // [in, out]
    b: Tensor, // [1, out]
}

impl Dense {
    fn new(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: kaiming_uniform(rng, &[fan_in, fan_out], fan_in),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        y.add(&self.b.broadcast_to(y.dims())?)
    }
}

/// Named-parameter access shared by all four networks; powers binding to a
/// tape, optimizer updates and checkpointing.
pub trait Net: Clone {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Copy whose parameters are watched leaves of `tape`.
    fn bind(&self, tape: &Tape) -> Self {
        let mut c = self.clone();
        for (_, t) in c.named_params_mut() {
            *t = tape.watch(t);
        }
        c
    }
}

/// FNV-1a over all parameter bytes, in named order. Used for freeze checks.
pub fn param_hash<N: Net>(net: &N) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, t) in net.named_params() {
        for v in t.data() {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

/// One optimizer step: reads gradients off `bound` (the tape-linked copy
/// used in the forward pass) and updates `net` in place. Parameters missing
/// from the gradient map are left untouched for SGD and treated as zero
/// gradient for Adam.
pub fn apply_grads<N: Net>(
    opt: &mut Optimizer,
    net: &mut N,
    bound: &N,
    grads: &Gradients,
) -> Result<()> {
    let gmap: Vec<(String, Vec<f32>)> = bound
        .named_params()
        .into_iter()
        .map(|(n, t)| {
            let g = grads
                .get_data(t)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (n, g)
        })
        .collect();
    let mut entries = net.named_params_mut();
    let mut args: Vec<(String, &mut Tensor, &[f32])> = entries
        .iter_mut()
        .zip(&gmap)
        .map(|((n, t), (gn, g))| {
            debug_assert_eq!(n, gn);
            (n.clone(), &mut **t, g.as_slice())
        })
        .collect();
    opt.step(&mut args)
}

fn expect_image_batch(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.dims() {
        [n, 1, h, w] if *h == IMAGE_SIDE && *w == IMAGE_SIDE => Ok(*n),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: x.dims().to_vec(),
            rhs: vec![0, 1, IMAGE_SIDE, IMAGE_SIDE],
        }),
    }
}

fn expect_code_batch(op: &'static str, z: &Tensor, dim: usize) -> Result<usize> {
    match z.dims() {
        [n, d] if *d == dim => Ok(*n),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: z.dims().to_vec(),
            rhs: vec![0, dim],
        }),
    }
}

/// Amortized posterior network: image batch -> (mu, log_var).
#[derive(Clone)]
pub struct Encoder {
    pub latent_dim: usize,
    convs: Vec<ConvLayer>,
    fc: Dense,
    head: Dense, // 256 -> 2 * latent_dim (mu ++ log_var)
}

impl Encoder {
    pub fn new(latent_dim: usize, rng: &mut SeededRng) -> Encoder {
        let convs = vec![
            ConvLayer::new(rng, 1, CONV_CHANNELS),
            ConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
            ConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
            ConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
        ];
        Encoder {
            latent_dim,
            convs,
            fc: Dense::new(rng, CONV_FEATURES, HIDDEN),
            head: Dense::new(rng, HIDDEN, 2 * latent_dim),
        }
    }

    /// Returns (mu, log_var), each N x latent_dim; log_var clamped to
    /// [-10, 10] to keep the reparameterized scale and KL finite.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = expect_image_batch("encode", x)?;
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        let h = h.reshape(&[n, CONV_FEATURES])?;
        let h = self.fc.forward(&h)?.relu()?;
        let out = self.head.forward(&h)?;
        let mu = out.narrow(1, 0, self.latent_dim)?;
        let log_var = out
            .narrow(1, self.latent_dim, self.latent_dim)?
            .clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        Ok((mu, log_var))
    }
}

impl Net for Encoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("enc.conv{i}.w"), &c.w));
            out.push((format!("enc.conv{i}.b"), &c.b));
        }
        out.push(("enc.fc.w".into(), &self.fc.w));
        out.push(("enc.fc.b".into(), &self.fc.b));
        out.push(("enc.head.w".into(), &self.head.w));
        out.push(("enc.head.b".into(), &self.head.b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("enc.conv{i}.w"), &mut c.w));
            out.push((format!("enc.conv{i}.b"), &mut c.b));
        }
        out.push(("enc.fc.w".into(), &mut self.fc.w));
        out.push(("enc.fc.b".into(), &mut self.fc.b));
        out.push(("enc.head.w".into(), &mut self.head.w));
        out.push(("enc.head.b".into(), &mut self.head.b));
        out
    }
}

/// Decoder p(x|z): code batch -> pre-sigmoid 64x64 logits.
#[derive(Clone)]
pub struct Decoder {
    pub latent_dim: usize,
    fc1: Dense, // latent -> 256
    fc2: Dense, // 256 -> 512
    tconvs: Vec<TConvLayer>,
}

impl Decoder {
    pub fn new(latent_dim: usize, rng: &mut SeededRng) -> Decoder {
        Decoder {
            latent_dim,
            fc1: Dense::new(rng, latent_dim, HIDDEN),
            fc2: Dense::new(rng, HIDDEN, CONV_FEATURES),
            tconvs: vec![
                TConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                TConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                TConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                TConvLayer::new(rng, CONV_CHANNELS, 1),
            ],
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let n = expect_code_batch("decode", z, self.latent_dim)?;
        let h = self.fc1.forward(z)?.relu()?;
        let h = self.fc2.forward(&h)?.relu()?;
        let mut h = h.reshape(&[n, CONV_CHANNELS, 4, 4])?;
        for (i, tconv) in self.tconvs.iter().enumerate() {
            h = tconv.forward(&h)?;
            if i + 1 < self.tconvs.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

impl Net for Decoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("dec.fc1.w".to_string(), &self.fc1.w),
            ("dec.fc1.b".to_string(), &self.fc1.b),
            ("dec.fc2.w".to_string(), &self.fc2.w),
            ("dec.fc2.b".to_string(), &self.fc2.b),
        ];
        for (i, t) in self.tconvs.iter().enumerate() {
            out.push((format!("dec.tconv{i}.w"), &t.w));
            out.push((format!("dec.tconv{i}.b"), &t.b));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("dec.fc1.w".to_string(), &mut self.fc1.w),
            ("dec.fc1.b".to_string(), &mut self.fc1.b),
            ("dec.fc2.w".to_string(), &mut self.fc2.w),
            ("dec.fc2.b".to_string(), &mut self.fc2.b),
        ];
        for (i, t) in self.tconvs.iter_mut().enumerate() {
            out.push((format!("dec.tconv{i}.w"), &mut t.w));
            out.push((format!("dec.tconv{i}.b"), &mut t.b));
        }
        out
    }
}

/// GAN generator: (noise, code) -> image batch in (0, 1). The code from the
/// frozen encoder is concatenated with the noise vector at the input.
#[derive(Clone)]
pub struct Generator {
    pub noise_dim: usize,
    pub code_dim: usize,
    fc: Dense, // noise+code -> 256*4*4
    tconvs: Vec<TConvLayer>,
}

impl Generator {
    pub fn new(noise_dim: usize, code_dim: usize, rng: &mut SeededRng) -> Generator {
        Generator {
            noise_dim,
            code_dim,
            fc: Dense::new(rng, noise_dim + code_dim, GEN_SEED_FEATURES),
            tconvs: vec![
                TConvLayer::new(rng, GEN_SEED_CHANNELS, CONV_CHANNELS),
                TConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                TConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                TConvLayer::new(rng, CONV_CHANNELS, 1),
            ],
        }
    }

    pub fn generate(&self, noise: &Tensor, code: &Tensor) -> Result<Tensor> {
        let n = expect_code_batch("generate", noise, self.noise_dim)?;
        let n2 = expect_code_batch("generate", code, self.code_dim)?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "generate",
                lhs: noise.dims().to_vec(),
                rhs: code.dims().to_vec(),
            });
        }
        let input = concat(&[noise, code], 1)?;
        let h = self.fc.forward(&input)?.relu()?;
        let mut h = h.reshape(&[n, GEN_SEED_CHANNELS, 4, 4])?;
        for (i, tconv) in self.tconvs.iter().enumerate() {
            h = tconv.forward(&h)?;
            if i + 1 < self.tconvs.len() {
                h = h.relu()?;
            }
        }
        h.sigmoid()
    }
}

impl Net for Generator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("gen.fc.w".to_string(), &self.fc.w),
            ("gen.fc.b".to_string(), &self.fc.b),
        ];
        for (i, t) in self.tconvs.iter().enumerate() {
            out.push((format!("gen.tconv{i}.w"), &t.w));
            out.push((format!("gen.tconv{i}.b"), &t.b));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("gen.fc.w".to_string(), &mut self.fc.w),
            ("gen.fc.b".to_string(), &mut self.fc.b),
        ];
        for (i, t) in self.tconvs.iter_mut().enumerate() {
            out.push((format!("gen.tconv{i}.w"), &mut t.w));
            out.push((format!("gen.tconv{i}.b"), &mut t.b));
        }
        out
    }
}

/// Discriminator: image batch -> one logit per image.
#[derive(Clone)]
pub struct Discriminator {
    convs: Vec<ConvLayer>,
    fc: Dense,
    head: Dense,
}

pub const LEAKY_SLOPE: f32 = 0.2;

impl Discriminator {
    pub fn new(rng: &mut SeededRng) -> Discriminator {
        Discriminator {
            convs: vec![
                ConvLayer::new(rng, 1, CONV_CHANNELS),
                ConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                ConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
                ConvLayer::new(rng, CONV_CHANNELS, CONV_CHANNELS),
            ],
            fc: Dense::new(rng, CONV_FEATURES, HIDDEN),
            head: Dense::new(rng, HIDDEN, 1),
        }
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        let n = expect_image_batch("discriminate", x)?;
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.leaky_relu(LEAKY_SLOPE)?;
        }
        let h = h.reshape(&[n, CONV_FEATURES])?;
        let h = self.fc.forward(&h)?.leaky_relu(LEAKY_SLOPE)?;
        self.head.forward(&h)?.reshape(&[n])
    }
}

impl Net for Discriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("disc.conv{i}.w"), &c.w));
            out.push((format!("disc.conv{i}.b"), &c.b));
        }
        out.push(("disc.fc.w".into(), &self.fc.w));
        out.push(("disc.fc.b".into(), &self.fc.b));
        out.push(("disc.head.w".into(), &self.head.w));
        out.push(("disc.head.b".into(), &self.head.b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("disc.conv{i}.w"), &mut c.w));
            out.push((format!("disc.conv{i}.b"), &mut c.b));
        }
        out.push(("disc.fc.w".into(), &mut self.fc.w));
        out.push(("disc.fc.b".into(), &mut self.fc.b));
        out.push(("disc.head.w".into(), &mut self.head.w));
        out.push(("disc.head.b".into(), &mut self.head.b));
        out
    }
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named-tensor bundle with key=value metadata. The binary layout is:
/// magic "DSNT", version u32 LE, metadata block (u32 LE byte length, then
/// UTF-8 key=value lines), then per tensor: name (u16 LE length + UTF-8),
/// rank u8, dims u32 LE each, raw f32 LE data.
#[derive(Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::CheckpointFormat(format!("missing metadata key {key}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("metadata key {key} is not an integer")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))
    }

    pub fn push_net<N: Net>(&mut self, net: &N) {
        for (name, t) in net.named_params() {
            self.tensors.push((name, t.detach()));
        }
    }

    pub fn push_optimizer(&mut self, opt: &Optimizer) {
        self.meta
            .insert("optimizer.step_count".into(), opt.step_count.to_string());
        self.meta
            .insert("optimizer.learning_rate".into(), format!("{}", opt.learning_rate));
        for (name, dims, data) in opt.state_tensors() {
            self.tensors
                .push((name, Tensor::new(dims, data).expect("moments are finite")));
        }
    }

    /// Fills a network's parameters from this checkpoint by name; every
    /// parameter must be present with matching dims.
    pub fn load_net<N: Net>(&self, net: &mut N) -> Result<()> {
        for (name, t) in net.named_params_mut() {
            let stored = self.tensor(&name)?;
            if stored.dims() != t.dims() {
                return Err(Error::ArchitectureMismatch(format!(
                    "tensor {name}: checkpoint dims {:?} vs model dims {:?}",
                    stored.dims(),
                    t.dims()
                )));
            }
            *t = stored.detach();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.dims().len() as u8])?;
            for &d in t.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad magic {magic:?}, expected DSNT"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = read_u32(&mut r)? as usize;
        if r.len() < meta_len {
            return Err(Error::CheckpointFormat("truncated metadata block".into()));
        }
        let meta_bytes = &r[..meta_len];
        r = &r[meta_len..];
        let meta_text = std::str::from_utf8(meta_bytes)
            .map_err(|_| Error::CheckpointFormat("metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CheckpointFormat(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let mut tensors = Vec::new();
        while !r.is_empty() {
            let name_len = read_u16(&mut r)? as usize;
            if r.len() < name_len {
                return Err(Error::CheckpointFormat("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?
                .to_string();
            r = &r[name_len..];
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank)?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                dims.push(read_u32(&mut r)? as usize);
            }
            let count: usize = dims.iter().product();
            if r.len() < count * 4 {
                return Err(Error::CheckpointFormat(format!(
                    "truncated data for tensor {name}"
                )));
            }
            let data: Vec<f32> = r[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[count * 4..];
            tensors.push((
                name,
                Tensor::new(dims, data)
                    .map_err(|e| Error::CheckpointFormat(format!("bad tensor payload: {e}")))?,
            ));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    let mut slice = *r;
    slice
        .read_exact(buf)
        .map_err(|_| Error::CheckpointFormat("unexpected end of file".into()))?;
    *r = slice;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Encoder/decoder pair from Step 1.
#[derive(Clone)]
pub struct VaeModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl VaeModel {
    pub fn new(latent_dim: usize, rng: &mut SeededRng) -> VaeModel {
        VaeModel {
            encoder: Encoder::new(latent_dim, rng),
            decoder: Decoder::new(latent_dim, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn to_checkpoint(&self, extra_meta: &[(String, String)]) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("model".into(), "vae".into());
        ck.meta
            .insert("latent_dim".into(), self.latent_dim().to_string());
        for (k, v) in extra_meta {
            ck.meta.insert(k.clone(), v.clone());
        }
        ck.push_net(&self.encoder);
        ck.push_net(&self.decoder);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<VaeModel> {
        let kind = ck.meta_str("model")?;
        if kind != "vae" {
            return Err(Error::ArchitectureMismatch(format!(
                "expected a vae checkpoint, found model={kind}"
            )));
        }
        let latent_dim = ck.meta_usize("latent_dim")?;
        let mut rng = SeededRng::new(0);
        let mut model = VaeModel::new(latent_dim, &mut rng);
        ck.load_net(&mut model.encoder)?;
        ck.load_net(&mut model.decoder)?;
        Ok(model)
    }
}

impl Net for VaeModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_params();
        out.extend(self.decoder.named_params());
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_params_mut();
        out.extend(self.decoder.named_params_mut());
        out
    }
}

/// Generator/discriminator pair from Step 2.
#[derive(Clone)]
pub struct GanModel {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanModel {
    pub fn new(noise_dim: usize, code_dim: usize, rng: &mut SeededRng) -> GanModel {
        GanModel {
            generator: Generator::new(noise_dim, code_dim, rng),
            discriminator: Discriminator::new(rng),
        }
    }

    pub fn to_checkpoint(&self, extra_meta: &[(String, String)]) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("model".into(), "idgan".into());
        ck.meta
            .insert("noise_dim".into(), self.generator.noise_dim.to_string());
        ck.meta
            .insert("code_dim".into(), self.generator.code_dim.to_string());
        for (k, v) in extra_meta {
            ck.meta.insert(k.clone(), v.clone());
        }
        ck.push_net(&self.generator);
        ck.push_net(&self.discriminator);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<GanModel> {
        let kind = ck.meta_str("model")?;
        if kind != "idgan" {
            return Err(Error::ArchitectureMismatch(format!(
                "expected an idgan checkpoint, found model={kind}"
            )));
        }
        let noise_dim = ck.meta_usize("noise_dim")?;
        let code_dim = ck.meta_usize("code_dim")?;
        let mut rng = SeededRng::new(0);
        let mut model = GanModel::new(noise_dim, code_dim, &mut rng);
        ck.load_net(&mut model.generator)?;
        ck.load_net(&mut model.discriminator)?;
        Ok(model)
    }
}

impl Net for GanModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.generator.named_params();
        out.extend(self.discriminator.named_params());
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.generator.named_params_mut();
        out.extend(self.discriminator.named_params_mut());
        out
    }
}

/// Zeroes a dense head so its outputs (and gradients into downstream terms)
/// start at exactly zero. Test fixture helper.
pub fn zero_head(net: &mut Encoder) {
    net.head.w = Tensor::zeros(net.head.w.dims());
    net.head.b = Tensor::zeros(net.head.b.dims());
}

pub fn batch_pixels(n: usize) -> usize {
    n * IMAGE_PIXELS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_batch(n: usize, fill: f32) -> Tensor {
        Tensor::full(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], fill)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let mut rng = SeededRng::new(1);
        let enc = Encoder::new(5, &mut rng);
        let x = image_batch(3, 0.5);
        let (mu, lv) = enc.encode(&x).unwrap();
        assert_eq!(mu.dims(), &[3, 5]);
        assert_eq!(lv.dims(), &[3, 5]);
        // identical rows for identical samples
        assert_eq!(mu.data()[0..5], mu.data()[5..10]);
        let (mu2, _) = enc.encode(&x).unwrap();
        assert_eq!(mu.data(), mu2.data());
    }

    #[test]
    fn encode_rejects_wrong_dims() {
        let mut rng = SeededRng::new(1);
        let enc = Encoder::new(3, &mut rng);
        let bad = Tensor::full(&[2, 1, 32, 32], 0.5);
        assert!(enc.encode(&bad).is_err());
    }

    #[test]
    fn zero_head_gives_standard_normal_posterior() {
        let mut rng = SeededRng::new(2);
        let mut enc = Encoder::new(4, &mut rng);
        zero_head(&mut enc);
        let (mu, lv) = enc.encode(&image_batch(2, 1.0)).unwrap();
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(lv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shape_contract() {
        let mut rng = SeededRng::new(3);
        let dec = Decoder::new(3, &mut rng);
        let z = Tensor::zeros(&[7, 3]);
        let logits = dec.decode(&z).unwrap();
        assert_eq!(logits.dims(), &[7, 1, 64, 64]);
        assert!(dec.decode(&Tensor::zeros(&[7, 4])).is_err());
    }

    #[test]
    fn generate_bounded_and_deterministic() {
        let mut rng = SeededRng::new(4);
        let gen = Generator::new(8, 3, &mut rng);
        let z = rng.gaussian_tensor(&[2, 8]);
        let c = rng.gaussian_tensor(&[2, 3]);
        let img = gen.generate(&z, &c).unwrap();
        assert_eq!(img.dims(), &[2, 1, 64, 64]);
        assert!(img.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let img2 = gen.generate(&z, &c).unwrap();
        assert_eq!(img.data(), img2.data());
        // mismatched code dim
        assert!(gen.generate(&z, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn discriminate_output_dims() {
        let mut rng = SeededRng::new(5);
        let d = Discriminator::new(&mut rng);
        let logits = d.discriminate(&image_batch(4, 0.3)).unwrap();
        assert_eq!(logits.dims(), &[4]);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact_forward() {
        let mut rng = SeededRng::new(6);
        let model = VaeModel::new(3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.dsnt");
        model
            .to_checkpoint(&[("note".into(), "probe".into())])
            .save(&path)
            .unwrap();
        let loaded = VaeModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let x = image_batch(2, 0.7);
        let (mu_a, lv_a) = model.encoder.encode(&x).unwrap();
        let (mu_b, lv_b) = loaded.encoder.encode(&x).unwrap();
        assert_eq!(mu_a.data(), mu_b.data());
        assert_eq!(lv_a.data(), lv_b.data());
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(
            model.decoder.decode(&z).unwrap().data(),
            loaded.decoder.decode(&z).unwrap().data()
        );
    }

    #[test]
    fn checkpoint_flipped_magic_rejected() {
        let mut rng = SeededRng::new(7);
        let model = VaeModel::new(3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.dsnt");
        model.to_checkpoint(&[]).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn checkpoint_truncation_rejected() {
        let mut rng = SeededRng::new(8);
        let model = VaeModel::new(3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.dsnt");
        model.to_checkpoint(&[]).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }

    #[test]
    fn latent_dim_mismatch_rejected() {
        let mut rng = SeededRng::new(9);
        let model = VaeModel::new(3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.dsnt");
        let mut ck = model.to_checkpoint(&[]);
        ck.meta.insert("latent_dim".into(), "5".into());
        ck.save(&path).unwrap();
        let err = VaeModel::from_checkpoint(&Checkpoint::load(&path).unwrap())
            .err()
            .expect("mismatched latent_dim must fail");
        assert!(matches!(err, Error::ArchitectureMismatch(_)), "{err}");
    }

    #[test]
    fn unknown_tensor_name_is_distinct_error() {
        let mut rng = SeededRng::new(10);
        let model = VaeModel::new(3, &mut rng);
        let mut ck = model.to_checkpoint(&[]);
        // drop one tensor: loading must name it
        ck.tensors.retain(|(n, _)| n != "dec.fc1.w");
        let err = VaeModel::from_checkpoint(&ck)
            .err()
            .expect("missing tensor must fail")
            .to_string();
        assert!(err.contains("dec.fc1.w"), "{err}");
    }

    #[test]
    fn param_hash_tracks_changes() {
        let mut rng = SeededRng::new(11);
        let mut enc = Encoder::new(3, &mut rng);
        let h0 = param_hash(&enc);
        assert_eq!(h0, param_hash(&enc));
        enc.named_params_mut()[0].1.update(|_, v| *v += 1.0);
        assert_ne!(h0, param_hash(&enc));
    }
}
