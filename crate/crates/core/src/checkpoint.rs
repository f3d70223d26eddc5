//! Binary checkpoint format.
//!
//! ```text
//! "SIMN" | version u8 | stage count u32
//! stage: role u8 | ndims u8 | dims u32* | flags u8 | nscalars u8 | scalars f64*
//!        | nblocks u8 | (len u32 | f64*)*
//! ```
//!
//! All integers and floats are little-endian. Stages appear in the order
//! input, layers, classifier, global pool. Scalars (orders, temperatures,
//! channel means) sit in the stage headers; blocks carry the array
//! parameters, so the payload is exactly `8 * array_param_count` bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mex::PoolSpec;
use crate::network::{Classifier, Layer, NetworkSpec, PoolStage, SimStage};
use crate::similarity::{ConvLpSim, SimilarityKind, SimilarityLayer};
use crate::tensor::{Matrix, PatchGeometry};

pub const MAGIC: &[u8; 4] = b"SIMN";
pub const VERSION: u8 = 1;

const ROLE_INPUT: u8 = 1;
const ROLE_LAYER: u8 = 2;
const ROLE_CLASSIFIER: u8 = 3;
const ROLE_GLOBAL: u8 = 4;

const LP: u8 = 1;
const WEIGHTED: u8 = 1 << 1;
const HAS_WHITEN: u8 = 1 << 2;
const WHITEN_TRAINABLE: u8 = 1 << 3;
const ORDER_TRAINABLE: u8 = 1 << 4;
const HAS_POOL: u8 = 1 << 5;
const POOL_TRAINABLE: u8 = 1 << 6;
const POOL_GLOBAL: u8 = 1 << 7;

/// A network plus the input preprocessing it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    /// Per-channel means subtracted from `[0, 1]` pixels, if any.
    pub channel_means: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec) -> Self {
        Self { spec, channel_means: None }
    }
}

struct Stage<'a> {
    role: u8,
    dims: Vec<usize>,
    flags: u8,
    scalars: Vec<f64>,
    blocks: Vec<&'a [f64]>,
}

fn stages(ck: &Checkpoint) -> Vec<Stage<'_>> {
    let spec = &ck.spec;
    let (h, w, c) = spec.input_dims();
    let mut out = vec![Stage {
        role: ROLE_INPUT,
        dims: vec![h, w, c],
        flags: u8::from(ck.channel_means.is_some()),
        scalars: ck.channel_means.clone().unwrap_or_default(),
        blocks: vec![],
    }];
    for layer in spec.layers() {
        let sim = layer.stage.sim();
        let g = layer.stage.geom();
        let mut flags = 0;
        if sim.kind() == SimilarityKind::Lp {
            flags |= LP;
        }
        if sim.is_weighted() {
            flags |= WEIGHTED;
        }
        if layer.order_trainable {
            flags |= ORDER_TRAINABLE;
        }
        let mut blocks = Vec::new();
        let mut whiten_rows = 0;
        if let SimStage::Whitened(cs) = &layer.stage {
            flags |= HAS_WHITEN;
            if cs.whiten_trainable {
                flags |= WHITEN_TRAINABLE;
            }
            whiten_rows = cs.whiten().rows();
            blocks.push(cs.whiten().data());
        }
        blocks.push(sim.templates().data());
        if let Some(u) = sim.weights() {
            blocks.push(u.data());
        }
        let pool = layer.pool.map(|p| {
            flags |= HAS_POOL;
            if p.beta_trainable {
                flags |= POOL_TRAINABLE;
            }
            if p.spec.global {
                flags |= POOL_GLOBAL;
            }
            p.spec
        });
        let (ph, pw, psh, psw, pbeta) =
            pool.map_or((0, 0, 0, 0, 0.0), |p| (p.window_h, p.window_w, p.stride_h, p.stride_w, p.beta));
        out.push(Stage {
            role: ROLE_LAYER,
            dims: vec![
                layer.stage.in_channels(),
                g.field_h,
                g.field_w,
                g.stride_h,
                g.stride_w,
                g.pad,
                whiten_rows,
                sim.n_templates(),
                sim.dim(),
                ph,
                pw,
                psh,
                psw,
            ],
            flags,
            scalars: vec![sim.order_p(), pbeta],
            blocks,
        });
    }
    let cl = spec.classifier();
    out.push(Stage {
        role: ROLE_CLASSIFIER,
        dims: vec![cl.offsets.rows(), cl.offsets.cols()],
        flags: u8::from(cl.beta_trainable),
        scalars: vec![cl.beta],
        blocks: vec![cl.offsets.data()],
    });
    out.push(Stage {
        role: ROLE_GLOBAL,
        dims: vec![],
        flags: u8::from(spec.global_beta_trainable),
        scalars: vec![spec.global_beta()],
        blocks: vec![],
    });
    out
}

/// Bytes outside the parameter blocks' float payload.
pub fn header_len(ck: &Checkpoint) -> usize {
    4 + 1
        + 4
        + stages(ck)
            .iter()
            .map(|s| 1 + 1 + 4 * s.dims.len() + 1 + 1 + 8 * s.scalars.len() + 1 + 4 * s.blocks.len())
            .sum::<usize>()
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let stages = stages(ck);
    let mut out = Vec::with_capacity(header_len(ck) + 8 * ck.spec.array_param_count());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(stages.len() as u32).to_le_bytes());
    let small = |n: usize, what: &str| {
        u8::try_from(n).map_err(|_| Error::InvalidParameter(format!("too many {what} for the format: {n}")))
    };
    let wide = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvalidParameter(format!("value {n} does not fit in u32")))
    };
    for s in &stages {
        out.push(s.role);
        out.push(small(s.dims.len(), "dims")?);
        for &d in &s.dims {
            out.extend_from_slice(&wide(d)?.to_le_bytes());
        }
        out.push(s.flags);
        out.push(small(s.scalars.len(), "scalars")?);
        for v in &s.scalars {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(small(s.blocks.len(), "blocks")?);
        for b in &s.blocks {
            out.extend_from_slice(&wide(b.len())?.to_le_bytes());
            for v in *b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(self.pos, format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

struct RawStage {
    offset: usize,
    role: u8,
    dims: Vec<usize>,
    flags: u8,
    scalars: Vec<f64>,
    blocks: Vec<Vec<f64>>,
}

fn read_stage(r: &mut Reader) -> Result<RawStage> {
    let offset = r.pos;
    let role = r.u8("stage role")?;
    let nd = r.u8("dim count")? as usize;
    let dims = (0..nd).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
    let flags = r.u8("flags")?;
    let ns = r.u8("scalar count")? as usize;
    let scalars = r.f64s(ns, "scalars")?;
    let nb = r.u8("block count")? as usize;
    let mut blocks = Vec::with_capacity(nb);
    for _ in 0..nb {
        let len = r.u32("block length")?;
        blocks.push(r.f64s(len, "parameter block")?);
    }
    Ok(RawStage {
        offset,
        role,
        dims,
        flags,
        scalars,
        blocks,
    })
}

impl RawStage {
    fn expect(&self, role: u8, dims: usize, scalars: usize, name: &str) -> Result<()> {
        let bad = |m: String| Error::Checkpoint {
            offset: self.offset,
            message: m,
        };
        if self.role != role {
            return Err(bad(format!("expected {name} stage (role {role}), found role {}", self.role)));
        }
        if self.dims.len() != dims {
            return Err(bad(format!("{name} stage needs {dims} dims, found {}", self.dims.len())));
        }
        if self.scalars.len() != scalars {
            return Err(bad(format!("{name} stage needs {scalars} scalars, found {}", self.scalars.len())));
        }
        Ok(())
    }

    fn fail(&self, e: Error) -> Error {
        Error::Checkpoint {
            offset: self.offset,
            message: e.to_string(),
        }
    }

    fn matrix(&self, i: usize, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.blocks.get(i).cloned().ok_or_else(|| Error::Checkpoint {
            offset: self.offset,
            message: format!("missing parameter block {i}"),
        })?;
        Matrix::new(rows, cols, data).map_err(|e| self.fail(e))
    }

    fn layer(&self) -> Result<Layer> {
        self.expect(ROLE_LAYER, 13, 2, "layer")?;
        let d = &self.dims;
        let (in_c, geom, whiten_rows, n, dim) =
            (d[0], PatchGeometry::new(d[1], d[2], d[3], d[4], d[5]), d[6], d[7], d[8]);
        let f = self.flags;
        let has_whiten = f & HAS_WHITEN != 0;
        let weighted = f & WEIGHTED != 0;
        let expected_blocks = 1 + usize::from(has_whiten) + usize::from(weighted);
        if self.blocks.len() != expected_blocks {
            return Err(self.fail(Error::Shape(format!(
                "layer flags call for {expected_blocks} blocks, found {}",
                self.blocks.len()
            ))));
        }
        let kind = if f & LP != 0 { SimilarityKind::Lp } else { SimilarityKind::Linear };
        let mut next = 0;
        let whiten = if has_whiten {
            next += 1;
            Some(self.matrix(0, whiten_rows, geom.patch_len(in_c))?)
        } else {
            None
        };
        let templates = self.matrix(next, n, dim)?;
        let weights = if weighted { Some(self.matrix(next + 1, n, dim)?) } else { None };
        let order_p = self.scalars[0];
        let stage = match whiten {
            Some(wm) => {
                let sim = SimilarityLayer::new(kind, templates, weights, order_p, PatchGeometry::unit(), whiten_rows)
                    .map_err(|e| self.fail(e))?;
                let mut c = ConvLpSim::new(wm, geom, in_c, sim).map_err(|e| self.fail(e))?;
                c.whiten_trainable = f & WHITEN_TRAINABLE != 0;
                SimStage::Whitened(c)
            }
            None => SimStage::Plain(
                SimilarityLayer::new(kind, templates, weights, order_p, geom, in_c).map_err(|e| self.fail(e))?,
            ),
        };
        let pool = (f & HAS_POOL != 0).then(|| {
            let beta = self.scalars[1];
            let spec = if f & POOL_GLOBAL != 0 {
                PoolSpec::global(beta)
            } else {
                PoolSpec {
                    window_h: d[9],
                    window_w: d[10],
                    stride_h: d[11],
                    stride_w: d[12],
                    beta,
                    global: false,
                }
            };
            PoolStage {
                spec,
                beta_trainable: f & POOL_TRAINABLE != 0,
            }
        });
        let mut layer = Layer::new(stage, pool);
        layer.order_trainable = f & ORDER_TRAINABLE != 0;
        Ok(layer)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.err(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}, this build reads {VERSION}")));
    }
    let count = r.u32("stage count")?;
    if count < 3 {
        return Err(r.err(5, format!("need at least 3 stages, found {count}")));
    }
    let input = read_stage(&mut r)?;
    let channels = input.dims.get(2).copied().unwrap_or(0);
    let means = input.flags & 1 != 0;
    input.expect(ROLE_INPUT, 3, if means { channels } else { 0 }, "input")?;
    let mut layers = Vec::with_capacity(count - 3);
    for _ in 0..count - 3 {
        layers.push(read_stage(&mut r)?.layer()?);
    }
    let cls = read_stage(&mut r)?;
    cls.expect(ROLE_CLASSIFIER, 2, 1, "classifier")?;
    if cls.blocks.len() != 1 {
        return Err(cls.fail(Error::Shape(format!("classifier needs 1 block, found {}", cls.blocks.len()))));
    }
    let classifier = Classifier {
        beta: cls.scalars[0],
        offsets: cls.matrix(0, cls.dims[0], cls.dims[1])?,
        beta_trainable: cls.flags & 1 != 0,
    };
    let global = read_stage(&mut r)?;
    global.expect(ROLE_GLOBAL, 0, 1, "global pool")?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let d = &input.dims;
    let mut spec = NetworkSpec::new((d[0], d[1], d[2]), layers, classifier, global.scalars[0])
        .map_err(|e| input.fail(e))?;
    spec.global_beta_trainable = global.flags & 1 != 0;
    Ok(Checkpoint {
        spec,
        channel_means: means.then(|| input.scalars.clone()),
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ck)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::Checkpoint {
        offset: 0,
        message: format!("writing {}: {e}", path.as_ref().display()),
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Checkpoint {
        offset: 0,
        message: format!("reading {}: {e}", path.as_ref().display()),
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::selftest::micro_network;

    fn bits(spec: &NetworkSpec) -> Vec<u64> {
        spec.params().iter().flat_map(|(_, _, v)| v.iter().map(|x| x.to_bits())).collect()
    }

    #[test]
    fn micro_round_trip() {
        let mut ck = Checkpoint::new(micro_network(3));
        ck.channel_means = Some(vec![0.25, -1e-300]);
        ck.spec.layers_mut()[0].order_trainable = false;
        let bytes = to_bytes(&ck).unwrap();
        assert_eq!(bytes.len(), header_len(&ck) + 8 * ck.spec.array_param_count());
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(bits(&back.spec), bits(&ck.spec));
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn reference_size() {
        let ck = Checkpoint::new(Architecture::cifar_reference().build(1).unwrap());
        let bytes = to_bytes(&ck).unwrap();
        assert_eq!(bytes.len() - header_len(&ck), 8 * 47_408);
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let bytes = to_bytes(&Checkpoint::new(micro_network(0))).unwrap();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint { offset: 4, .. })));
        for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let e = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, Error::Checkpoint { offset, .. } if offset <= cut), "{e}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Checkpoint { offset, .. }) if offset == bytes.len()));
        // u <= 0 is refused on load
        let ck = Checkpoint::new(micro_network(0));
        let u_first = ck.spec.layers()[0].stage.sim().weights().unwrap().data()[0];
        let needle = u_first.to_le_bytes();
        let at = bytes.windows(8).position(|w| w == needle).unwrap();
        let mut bad = bytes.clone();
        bad[at..at + 8].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn files() {
        let dir = std::env::temp_dir().join(format!("simnet-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.simn");
        let ck = Checkpoint::new(micro_network(1));
        write_checkpoint(&path, &ck).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ck);
        assert!(read_checkpoint(dir.join("missing")).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
