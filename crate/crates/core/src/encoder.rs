//! Parametric encoder: typed per-modality projections, mean pooling over the
//! flattened items, a two-layer tanh MLP, and L2 normalization. Nested
//! prefix dimensions make every unit-normalized prefix of the output a
//! usable embedding. The forward pass is analytic end to end; the matching
//! backward pass lives in the trainers.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::model::{EncodeInput, Modality};
use crate::rng::Stream;

/// Strictly increasing nested dimensions; the last entry is the full output
/// dimension D.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedDims(Vec<usize>);

impl NestedDims {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::validation("nested dims must be non-empty"));
        }
        if dims[0] < 1 {
            return Err(Error::validation("nested dims must be >= 1"));
        }
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("nested dims must be strictly increasing"));
        }
        Ok(NestedDims(dims))
    }

    pub fn full(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.contains(&k)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl Default for NestedDims {
    fn default() -> Self {
        NestedDims(vec![8, 32, 64, 128])
    }
}

/// The trainable parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub w_img: Mat,
    pub w_txt: Mat,
    pub w_ocr: Mat,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl Tensors {
    pub fn zeros(d_raw: usize, d_hid: usize, d_out: usize) -> Self {
        Tensors {
            w_img: Mat::zeros(d_hid, d_raw),
            w_txt: Mat::zeros(d_hid, d_raw),
            w_ocr: Mat::zeros(d_hid, d_raw),
            w1: Mat::zeros(d_hid, d_hid),
            b1: vec![0.0; d_hid],
            w2: Mat::zeros(d_out, d_hid),
            b2: vec![0.0; d_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensors::zeros(self.w_img.cols, self.w_img.rows, self.w2.rows)
    }

    pub fn len(&self) -> usize {
        self.w_img.data.len() * 3 + self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w_img
            .iter()
            .chain(self.w_txt.iter())
            .chain(self.w_ocr.iter())
            .chain(self.w1.iter())
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_img
            .iter_mut()
            .chain(self.w_txt.iter_mut())
            .chain(self.w_ocr.iter_mut())
            .chain(self.w1.iter_mut())
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &Tensors) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.iter_mut() {
            *a *= s;
        }
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        *self.iter().nth(idx).expect("index in range")
    }

    pub fn set_flat(&mut self, idx: usize, v: f64) {
        *self.iter_mut().nth(idx).expect("index in range") = v;
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    fn w(&self, m: Modality) -> &Mat {
        match m {
            Modality::Image => &self.w_img,
            Modality::Text => &self.w_txt,
            Modality::Ocr => &self.w_ocr,
        }
    }

    fn w_mut(&mut self, m: Modality) -> &mut Mat {
        match m {
            Modality::Image => &mut self.w_img,
            Modality::Text => &mut self.w_txt,
            Modality::Ocr => &mut self.w_ocr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub d_raw: usize,
    pub d_hid: usize,
    pub dims: NestedDims,
    pub t: Tensors,
}

impl EncoderParams {
    /// Symmetric uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
    /// zero biases, seeded.
    pub fn init(d_raw: usize, d_hid: usize, dims: NestedDims, seed: u64) -> Self {
        let d_out = dims.full();
        let mut t = Tensors::zeros(d_raw, d_hid, d_out);
        let fill = |m: &mut Mat, fan_in: usize, block: u64| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut s = Stream::new(seed, "init", &[block]);
            for v in m.iter_mut() {
                *v = s.uniform_in(-bound, bound);
            }
        };
        fill(&mut t.w_img, d_raw, 0);
        fill(&mut t.w_txt, d_raw, 1);
        fill(&mut t.w_ocr, d_raw, 2);
        fill(&mut t.w1, d_hid, 3);
        fill(&mut t.w2, d_hid, 4);
        EncoderParams {
            d_raw,
            d_hid,
            dims,
            t,
        }
    }

    pub fn d_out(&self) -> usize {
        self.dims.full()
    }

    pub fn validate(&self) -> Result<()> {
        let d_out = self.d_out();
        let shapes_ok = self.t.w_img.rows == self.d_hid
            && self.t.w_img.cols == self.d_raw
            && self.t.w_txt.rows == self.d_hid
            && self.t.w_txt.cols == self.d_raw
            && self.t.w_ocr.rows == self.d_hid
            && self.t.w_ocr.cols == self.d_raw
            && self.t.w1.rows == self.d_hid
            && self.t.w1.cols == self.d_hid
            && self.t.b1.len() == self.d_hid
            && self.t.w2.rows == d_out
            && self.t.w2.cols == self.d_hid
            && self.t.b2.len() == d_out;
        if !shapes_ok {
            return Err(Error::validation("encoder parameter shapes inconsistent"));
        }
        if !self.t.all_finite() {
            return Err(Error::numeric("encoder parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Binary checkpoint: magic `UNE1`, u32 {d_raw, d_hid, D, |K|}, the K
    /// list as u32, then each block row-major f32 little-endian in field
    /// order. Bit-exact across save/load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"UNE1")?;
        for v in [
            self.d_raw as u32,
            self.d_hid as u32,
            self.d_out() as u32,
            self.dims.as_slice().len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &k in self.dims.as_slice() {
            w.write_all(&(k as u32).to_le_bytes())?;
        }
        for v in self.t.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EncoderParams> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"UNE1" {
            return Err(Error::validation("bad checkpoint magic, expected UNE1"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let d_raw = read_u32(&mut r)? as usize;
        let d_hid = read_u32(&mut r)? as usize;
        let d_out = read_u32(&mut r)? as usize;
        let n_k = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(n_k);
        for _ in 0..n_k {
            dims.push(read_u32(&mut r)? as usize);
        }
        let dims = NestedDims::new(dims)?;
        if dims.full() != d_out {
            return Err(Error::validation("checkpoint D does not match last nested dim"));
        }
        let mut t = Tensors::zeros(d_raw, d_hid, d_out);
        let mut f32buf = [0u8; 4];
        for v in t.iter_mut() {
            r.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf) as f64;
        }
        // Reject trailing garbage.
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::validation("checkpoint has trailing bytes"));
        }
        let params = EncoderParams {
            d_raw,
            d_hid,
            dims,
            t,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Intermediate state of one forward pass, retained for backpropagation.
pub struct ForwardCache {
    pub modalities: Vec<Modality>,
    pub feats: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    /// tanh activations of the hidden layer.
    pub a: Vec<f64>,
    /// Pre-normalization output.
    pub y: Vec<f64>,
    /// Cumulative squared-prefix sums of y: prefix_sq[k] = sum of y[..k]^2.
    pub prefix_sq: Vec<f64>,
}

impl ForwardCache {
    /// Unit norm of the k-prefix of y.
    pub fn prefix_norm(&self, k: usize) -> f64 {
        self.prefix_sq[k].sqrt()
    }
}

pub fn encode_forward(params: &EncoderParams, input: EncodeInput<'_>) -> Result<ForwardCache> {
    let items = input.flatten()?;
    forward_features(
        params,
        items.iter().map(|it| (it.modality, it.features.as_slice())),
    )
}

/// Forward pass over bare (modality, features) items; the entry point for
/// foreign callers that do not build domain objects.
pub fn forward_features<'a>(
    params: &EncoderParams,
    items: impl IntoIterator<Item = (Modality, &'a [f32])>,
) -> Result<ForwardCache> {
    let items: Vec<(Modality, &[f32])> = items.into_iter().collect();
    if items.is_empty() {
        return Err(Error::validation(
            "degenerate input: flatten selected zero items",
        ));
    }
    let n = items.len() as f64;
    let mut pooled = vec![0.0; params.d_hid];
    let mut modalities = Vec::with_capacity(items.len());
    let mut feats = Vec::with_capacity(items.len());
    for (i, (modality, features)) in items.iter().enumerate() {
        if features.len() != params.d_raw {
            return Err(Error::validation(format!(
                "item {i} has {} features, encoder expects {}",
                features.len(),
                params.d_raw
            )));
        }
        let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
        let h = params.t.w(*modality).matvec(&x);
        for (p, hv) in pooled.iter_mut().zip(h.iter()) {
            *p += hv / n;
        }
        modalities.push(*modality);
        feats.push(x);
    }
    let mut z = params.t.w1.matvec(&pooled);
    for (zv, b) in z.iter_mut().zip(params.t.b1.iter()) {
        *zv += b;
    }
    let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
    let mut y = params.t.w2.matvec(&a);
    for (yv, b) in y.iter_mut().zip(params.t.b2.iter()) {
        *yv += b;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("NaN in encoder forward pass"));
    }
    let mut prefix_sq = Vec::with_capacity(y.len() + 1);
    prefix_sq.push(0.0);
    let mut acc = 0.0;
    for &v in &y {
        acc += v * v;
        prefix_sq.push(acc);
    }
    Ok(ForwardCache {
        modalities,
        feats,
        pooled,
        a,
        y,
        prefix_sq,
    })
}

/// Encodes an item, note, or sub-note into a unit-norm embedding.
pub fn encode(params: &EncoderParams, input: EncodeInput<'_>) -> Result<Embedding> {
    finish(encode_forward(params, input)?)
}

/// Encodes bare (modality, features) items into a unit-norm embedding.
pub fn encode_features<'a>(
    params: &EncoderParams,
    items: impl IntoIterator<Item = (Modality, &'a [f32])>,
) -> Result<Embedding> {
    finish(forward_features(params, items)?)
}

fn finish(cache: ForwardCache) -> Result<Embedding> {
    let norm = cache.prefix_norm(cache.y.len());
    if norm < 1e-12 {
        return Err(Error::numeric("encoder output has zero norm"));
    }
    Ok(Embedding(cache.y.iter().map(|v| v / norm).collect()))
}

/// Accumulates parameter gradients for one encoded object given dL/dy.
pub fn backward_into(
    params: &EncoderParams,
    cache: &ForwardCache,
    dl_dy: &[f64],
    grad: &mut Tensors,
) {
    debug_assert_eq!(dl_dy.len(), cache.y.len());
    // y = W2 a + b2
    grad.w2.add_outer(1.0, dl_dy, &cache.a);
    for (g, d) in grad.b2.iter_mut().zip(dl_dy.iter()) {
        *g += d;
    }
    let da = params.t.w2.matvec_t(dl_dy);
    // a = tanh(z)
    let dz: Vec<f64> = da
        .iter()
        .zip(cache.a.iter())
        .map(|(d, a)| d * (1.0 - a * a))
        .collect();
    // z = W1 pooled + b1
    grad.w1.add_outer(1.0, &dz, &cache.pooled);
    for (g, d) in grad.b1.iter_mut().zip(dz.iter()) {
        *g += d;
    }
    let dp = params.t.w1.matvec_t(&dz);
    // pooled = mean_j W_mod(j) x_j
    let n = cache.feats.len() as f64;
    for (modality, x) in cache.modalities.iter().zip(cache.feats.iter()) {
        grad.w_mut(*modality).add_outer(1.0 / n, &dp, x);
    }
}

/// First k coordinates re-normalized to unit length. k must be one of the
/// nested dims.
pub fn truncate(e: &Embedding, k: usize, dims: &NestedDims) -> Result<Embedding> {
    if !dims.contains(k) {
        return Err(Error::validation(format!(
            "truncation dim {k} not in nested set {:?}",
            dims.as_slice()
        )));
    }
    if k > e.dim() {
        return Err(Error::validation(format!(
            "truncation dim {k} exceeds embedding dim {}",
            e.dim()
        )));
    }
    let mut v: Vec<f64> = e.0[..k].to_vec();
    let n = crate::linalg::norm(&v);
    if n < 1e-12 {
        return Err(Error::numeric("zero prefix vector in truncate"));
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(Embedding(v))
}

/// Cosine similarity of two equal-length unit vectors, clamped against
/// rounding.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "cosine length mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(dot(&a.0, &b.0).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{note_from_features, SubNote};

    fn params(d_raw: usize) -> EncoderParams {
        EncoderParams::init(d_raw, 16, NestedDims::new(vec![4, 8, 16]).unwrap(), 7)
    }

    fn note(d: usize) -> crate::model::Note {
        let feat = |k: usize| (0..d).map(|j| ((k * 31 + j * 7) % 13) as f32 * 0.1 - 0.6).collect();
        note_from_features(
            1,
            vec![feat(1), feat(2), feat(3)],
            vec![feat(4), feat(5), feat(6)],
            feat(7),
            feat(8),
        )
        .unwrap()
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let p = params(6);
        let n = note(6);
        let e1 = encode(&p, EncodeInput::Note(&n)).unwrap();
        let e2 = encode(&p, EncodeInput::Note(&n)).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn encode_permutation_invariant() {
        let p = params(6);
        let n = note(6);
        let mut swapped = n.clone();
        swapped.images.swap(0, 2);
        swapped.ocr_texts.swap(0, 2);
        // Ids/origins move with the items; mean pooling ignores order.
        let e1 = encode(&p, EncodeInput::Note(&n)).unwrap();
        let e2 = encode(&p, EncodeInput::Note(&swapped)).unwrap();
        for (a, b) in e1.values().iter().zip(e2.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_image_equals_singleton_subnote() {
        let p = params(6);
        let n = note(6);
        let sub = SubNote {
            base: 1,
            image_subset: vec![2],
            include_title: false,
            include_body: false,
            injected_items: Vec::new(),
        };
        // The subnote also carries the aligned ocr, so compare a pure item
        // against a subnote that flattens to exactly that item: inject only.
        let only_img = SubNote {
            base: 1,
            image_subset: vec![],
            include_title: false,
            include_body: false,
            injected_items: vec![n.images[1].clone()],
        };
        let e_item = encode(&p, EncodeInput::Item(&n.images[1])).unwrap();
        let e_sub = encode(&p, EncodeInput::Sub { base: &n, sub: &only_img }).unwrap();
        assert_eq!(e_item, e_sub);
        // And the image+ocr subnote differs (two items pooled).
        let e_two = encode(&p, EncodeInput::Sub { base: &n, sub: &sub }).unwrap();
        assert_ne!(e_item, e_two);
    }

    #[test]
    fn constant_encoder_maps_everything_to_b2_direction() {
        let mut p = params(6);
        p.t = Tensors::zeros(6, 16, 16);
        for (i, b) in p.t.b2.iter_mut().enumerate() {
            *b = (i + 1) as f64;
        }
        let n = note(6);
        let e1 = encode(&p, EncodeInput::Note(&n)).unwrap();
        let e2 = encode(&p, EncodeInput::Item(&n.title)).unwrap();
        assert_eq!(e1, e2);
        let mut expect = p.t.b2.clone();
        crate::linalg::normalize(&mut expect);
        for (a, b) in e1.values().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncate_full_dim_is_identity() {
        let p = params(6);
        let n = note(6);
        let e = encode(&p, EncodeInput::Note(&n)).unwrap();
        let t = truncate(&e, 16, &p.dims).unwrap();
        for (a, b) in e.values().iter().zip(t.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncate_renormalizes_and_is_scale_invariant() {
        let dims = NestedDims::new(vec![2, 4]).unwrap();
        let e = Embedding(vec![0.6, 0.8, 0.0, 0.0]);
        let t = truncate(&e, 2, &dims).unwrap();
        assert!((t.values()[0] - 0.6).abs() < 1e-12);
        assert!((t.values()[1] - 0.8).abs() < 1e-12);
        // Positive scaling of the prefix changes nothing after renorm.
        let scaled = Embedding(vec![0.06, 0.08, 0.9, 0.42]);
        let t2 = truncate(&scaled, 2, &dims).unwrap();
        assert!((t2.values()[0] - 0.6).abs() < 1e-12);
        assert!((t2.values()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn truncate_rejects_bad_dims_and_zero_prefix() {
        let dims = NestedDims::new(vec![2, 4]).unwrap();
        let e = Embedding(vec![0.0, 0.0, 1.0, 0.0]);
        assert!(truncate(&e, 3, &dims).is_err());
        assert!(matches!(
            truncate(&e, 2, &dims),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn cosine_basics() {
        let e = Embedding(vec![1.0, 0.0]);
        let f = Embedding(vec![0.0, 1.0]);
        let neg = Embedding(vec![-1.0, 0.0]);
        assert_eq!(cosine(&e, &e).unwrap(), 1.0);
        assert_eq!(cosine(&e, &neg).unwrap(), -1.0);
        assert_eq!(cosine(&e, &f).unwrap(), 0.0);
        let g = Embedding(vec![1.0, 0.0, 0.0]);
        assert!(cosine(&e, &g).is_err());
    }

    #[test]
    fn nested_dims_validation() {
        assert!(NestedDims::new(vec![]).is_err());
        assert!(NestedDims::new(vec![0, 4]).is_err());
        assert!(NestedDims::new(vec![4, 4]).is_err());
        assert!(NestedDims::new(vec![8, 4]).is_err());
        assert!(NestedDims::new(vec![64, 512, 1024, 4096]).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let p = params(6);
        let dir = tempfile::tempdir().unwrap();
        let f1 = dir.path().join("a.bin");
        let f2 = dir.path().join("b.bin");
        p.save(&f1).unwrap();
        let q = EncoderParams::load(&f1).unwrap();
        q.save(&f2).unwrap();
        assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
        assert_eq!(q.d_raw, p.d_raw);
        assert_eq!(q.dims, p.dims);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.bin");
        std::fs::write(&f, b"NOPE0000").unwrap();
        assert!(EncoderParams::load(&f).is_err());
    }

    #[test]
    fn finite_in_finite_out() {
        // Parameters with entries in [-10, 10] keep outputs finite.
        let mut p = params(6);
        for v in p.t.iter_mut() {
            *v = (*v * 1000.0).clamp(-10.0, 10.0);
        }
        let n = note(6);
        let e = encode(&p, EncodeInput::Note(&n)).unwrap();
        assert!(e.values().iter().all(|v| v.is_finite()));
    }
}
