//! On-disk formats: cubes, caption corpora, vocabularies, checkpoints,
//! synthetic patch archives and the plain-text exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hsi_ldm_core::hsicube::{CaptionCorpus, Granularity, HsiCube};
use hsi_ldm_core::params::{AdamW, AdamWConfig, ParamStore};
use hsi_ldm_core::synth::SyntheticDataset;
use hsi_ldm_core::textcond::Vocabulary;
use hsi_ldm_core::trainer::{LdmConfig, LdmModel};
use hsi_ldm_core::vae::{Vae, VaeConfig};

use crate::error::{CliError, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const VAE_MAGIC: &[u8; 4] = b"VAE1";
pub const LDM_MAGIC: &[u8; 4] = b"LDM1";
pub const PATCH_MAGIC: &[u8; 4] = b"HSP1";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

/// Cursor over a file's bytes. Running out of bytes is an I/O error
/// (truncation); structural problems are format errors.
struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, data: &'a [u8]) -> Self {
        Self { path, data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(CliError::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated at byte {} (need {n} more)", self.pos)),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| self.fail("file too short for a header"))?;
        if got != expected {
            return Err(self.fail(format!("expected magic {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.fail(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }

    fn fail(&self, message: impl Into<String>) -> CliError {
        CliError::format(self.path, message)
    }
}

pub fn encode_cube(cube: &HsiCube) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CUBE_MAGIC);
    w.u32(cube.bands());
    w.u32(cube.height());
    w.u32(cube.width());
    cube.data().iter().for_each(|&v| w.f32(v));
    cube.labels().iter().for_each(|&l| w.u16(l));
    w.0
}

/// Parses an HSC1 cube; `path` only labels errors.
pub fn decode_cube(path: &Path, bytes: &[u8]) -> Result<HsiCube> {
    let mut r = Reader::new(path, bytes);
    r.magic(CUBE_MAGIC)?;
    let (c, h, w) = (r.u32()?, r.u32()?, r.u32()?);
    if c == 0 || h == 0 || w == 0 {
        return Err(r.fail(format!("zero dimension in {c}×{h}×{w}")));
    }
    let n = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| r.fail("dimensions overflow"))?;
    let data = r.f32s(n)?;
    let labels = (0..h * w).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(HsiCube::new(c, h, w, data, labels)?)
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    decode_cube(path, &read_bytes(path)?)
}

pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    write_bytes(path, &encode_cube(cube))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub class_id: u16,
    pub caption: String,
    pub granularity: String,
}

pub fn encode_captions(corpus: &CaptionCorpus) -> String {
    let mut out = String::new();
    for (r, caption) in corpus.iter() {
        let rec = CaptionRecord { class_id: r.class, caption: caption.to_string(), granularity: corpus.granularity.as_str().into() };
        out.push_str(&serde_json::to_string(&rec).expect("caption record serializes"));
        out.push('\n');
    }
    out
}

/// Parses caption JSON-lines. The corpus takes the granularity of the first
/// record; blank lines are skipped.
pub fn decode_captions(path: &Path, text: &str) -> Result<CaptionCorpus> {
    let mut corpus: Option<CaptionCorpus> = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: CaptionRecord = serde_json::from_str(line).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
        let granularity = match rec.granularity.as_str() {
            "coarse" => Granularity::Coarse,
            "fine" => Granularity::Fine,
            other => return Err(CliError::format(path, format!("line {}: unknown granularity {other:?}", i + 1))),
        };
        if rec.class_id == 0 {
            return Err(CliError::format(path, format!("line {}: class ids start at 1", i + 1)));
        }
        corpus.get_or_insert_with(|| CaptionCorpus::new(granularity)).push(rec.class_id, rec.caption);
    }
    corpus.ok_or_else(|| CliError::format(path, "no caption records"))
}

pub fn read_captions(path: &Path) -> Result<CaptionCorpus> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    decode_captions(path, &text)
}

pub fn write_captions(path: &Path, corpus: &CaptionCorpus) -> Result<()> {
    write_bytes(path, encode_captions(corpus).as_bytes())
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(vocab.map()).expect("vocabulary serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let map: BTreeMap<String, u32> = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
    Vocabulary::from_map(map).map_err(|e| CliError::format(path, e.to_string()))
}

fn write_index(w: &mut Writer, store: &ParamStore) {
    w.u32(store.sections().len());
    for s in store.sections() {
        w.u16(u16::try_from(s.name.len()).expect("short section name"));
        w.bytes(s.name.as_bytes());
        w.u32(s.rows);
        w.u32(s.cols);
    }
}

/// Checks a stored section index against the layout the architecture builds.
fn check_index(r: &mut Reader, expected: &ParamStore) -> Result<()> {
    let n = r.u32()?;
    if n != expected.sections().len() {
        return Err(r.fail(format!("{n} parameter sections, architecture has {}", expected.sections().len())));
    }
    for s in expected.sections() {
        let len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let (rows, cols) = (r.u32()?, r.u32()?);
        if name != s.name || rows != s.rows || cols != s.cols {
            return Err(r.fail(format!("section {name} {rows}×{cols} does not match {} {}×{}", s.name, s.rows, s.cols)));
        }
    }
    Ok(())
}

fn write_f32_store(w: &mut Writer, store: &ParamStore) {
    write_index(w, store);
    w.u64(store.len() as u64);
    store.flat().iter().for_each(|&v| w.f32(v as f32));
}

fn read_f32_store(r: &mut Reader, layout: &ParamStore) -> Result<Vec<f64>> {
    check_index(r, layout)?;
    let n = r.u64()? as usize;
    if n != layout.len() {
        return Err(r.fail(format!("{n} parameter values, expected {}", layout.len())));
    }
    Ok(r.f32s(n)?.into_iter().map(f64::from).collect())
}

/// VAE1: architecture header, then the generator and discriminator stores,
/// each as a named-section index followed by f32 values.
pub fn encode_vae(vae: &Vae) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(VAE_MAGIC);
    let c = vae.config;
    w.u32(c.bands);
    w.u32(c.hidden);
    w.f64(c.lambda_kl);
    w.f64(c.lambda_adv);
    write_f32_store(&mut w, &vae.generator);
    write_f32_store(&mut w, &vae.discriminator);
    w.0
}

pub fn decode_vae(path: &Path, bytes: &[u8]) -> Result<Vae> {
    let mut r = Reader::new(path, bytes);
    r.magic(VAE_MAGIC)?;
    let config = VaeConfig { bands: r.u32()?, hidden: r.u32()?, lambda_kl: r.f64()?, lambda_adv: r.f64()? };
    let skeleton = Vae::new(config, &mut hsi_ldm_core::rng_stream(0, 0)).map_err(|e| r.fail(e.to_string()))?;
    let gen = read_f32_store(&mut r, &skeleton.generator)?;
    let disc = read_f32_store(&mut r, &skeleton.discriminator)?;
    r.finish()?;
    Ok(Vae::with_params(config, &gen, &disc)?)
}

pub fn read_vae(path: &Path) -> Result<Vae> {
    decode_vae(path, &read_bytes(path)?)
}

pub fn write_vae(path: &Path, vae: &Vae) -> Result<()> {
    write_bytes(path, &encode_vae(vae))
}

/// Everything needed to resume training or sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LdmCheckpoint {
    pub config: LdmConfig,
    /// Multiplier from VAE mean latents to diffusion latents.
    pub latent_scale: f64,
    pub epoch: u64,
    pub base: ParamStore,
    pub ema: ParamStore,
    pub optimizer: AdamW,
}

impl LdmCheckpoint {
    pub fn model(&self) -> Result<LdmModel> {
        Ok(LdmModel::skeleton(self.config)?.0)
    }
}

/// LDM1: architecture header, latent scale and epoch counter, the section
/// index, then base and EMA values and the optimizer moments, all f64.
pub fn encode_ldm(ckpt: &LdmCheckpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(LDM_MAGIC);
    let c = ckpt.config;
    for v in [c.side, c.dim, c.heads, c.blocks, c.text_layers, c.vocab_size, c.steps] {
        w.u32(v);
    }
    w.f64(c.beta_min);
    w.f64(c.beta_max);
    w.f64(ckpt.latent_scale);
    w.u64(ckpt.epoch);
    write_index(&mut w, &ckpt.base);
    w.u64(ckpt.base.len() as u64);
    for v in ckpt.base.flat().iter().chain(ckpt.ema.flat()) {
        w.f64(*v);
    }
    let o = &ckpt.optimizer;
    for v in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
        w.f64(v);
    }
    w.u64(o.step);
    for v in o.m.iter().chain(&o.v) {
        w.f64(*v);
    }
    w.0
}

pub fn decode_ldm(path: &Path, bytes: &[u8]) -> Result<LdmCheckpoint> {
    let mut r = Reader::new(path, bytes);
    r.magic(LDM_MAGIC)?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let [side, dim, heads, blocks, text_layers, vocab_size, steps] = dims;
    let config = LdmConfig { side, dim, heads, blocks, text_layers, vocab_size, steps, beta_min: r.f64()?, beta_max: r.f64()? };
    let latent_scale = r.f64()?;
    let epoch = r.u64()?;
    let (_, layout) = LdmModel::skeleton(config).map_err(|e| r.fail(e.to_string()))?;
    check_index(&mut r, &layout)?;
    let n = r.u64()? as usize;
    if n != layout.len() {
        return Err(r.fail(format!("{n} parameter values, expected {}", layout.len())));
    }
    let mut base = layout.clone();
    base.set_flat(&r.f64s(n)?)?;
    let mut ema = layout;
    ema.set_flat(&r.f64s(n)?)?;
    let oc = AdamWConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
    let step = r.u64()?;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    r.finish()?;
    Ok(LdmCheckpoint { config, latent_scale, epoch, base, ema, optimizer: AdamW { config: oc, m, v, step } })
}

pub fn read_ldm(path: &Path) -> Result<LdmCheckpoint> {
    decode_ldm(path, &read_bytes(path)?)
}

pub fn write_ldm(path: &Path, ckpt: &LdmCheckpoint) -> Result<()> {
    write_bytes(path, &encode_ldm(ckpt))
}

/// HSP1: count, bands and side, then per patch the class id, seed, ω and
/// the band-major f32 pixels.
pub fn encode_patches(set: &SyntheticDataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(PATCH_MAGIC);
    w.u32(set.patches.len());
    let (bands, side) = set.patches.first().map_or((0, 0), |s| (s.patch.bands, s.patch.side));
    w.u32(bands);
    w.u32(side);
    for s in &set.patches {
        assert_eq!((s.patch.bands, s.patch.side), (bands, side), "archive patches share one shape");
        w.u16(s.patch.center_label);
        w.u64(s.seed);
        w.f32(s.omega as f32);
        s.patch.pixels.iter().for_each(|&v| w.f32(v));
    }
    w.0
}

/// One archived patch without its caption (kept in the manifest).
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedPatch {
    pub class_id: u16,
    pub seed: u64,
    pub omega: f32,
    pub bands: usize,
    pub side: usize,
    pub pixels: Vec<f32>,
}

pub fn decode_patches(path: &Path, bytes: &[u8]) -> Result<Vec<ArchivedPatch>> {
    let mut r = Reader::new(path, bytes);
    r.magic(PATCH_MAGIC)?;
    let (count, bands, side) = (r.u32()?, r.u32()?, r.u32()?);
    let n = bands * side * side;
    let out = (0..count)
        .map(|_| Ok(ArchivedPatch { class_id: r.u16()?, seed: r.u64()?, omega: r.f32()?, bands, side, pixels: r.f32s(n)? }))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub class_id: u16,
    pub caption: String,
    pub seed: u64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub bands: usize,
    pub side: usize,
    pub patches: Vec<ManifestEntry>,
}

pub fn manifest(set: &SyntheticDataset) -> Manifest {
    let (bands, side) = set.patches.first().map_or((0, 0), |s| (s.patch.bands, s.patch.side));
    let patches = set
        .patches
        .iter()
        .enumerate()
        .map(|(index, s)| ManifestEntry { index, class_id: s.patch.center_label, caption: s.caption.clone(), seed: s.seed, omega: s.omega })
        .collect();
    Manifest { bands, side, patches }
}

/// Writes `<stem>.hsp` and `<stem>.json` next to each other.
pub fn write_archive(hsp: &Path, json: &Path, set: &SyntheticDataset) -> Result<()> {
    write_bytes(hsp, &encode_patches(set))?;
    let mut text = serde_json::to_string_pretty(&manifest(set)).expect("manifest serializes");
    text.push('\n');
    write_bytes(json, text.as_bytes())
}

/// Comma-separated table with a header row.
pub fn csv<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.as_ref().join(","));
        out.push('\n');
    }
    out
}

/// Binary 8-bit greyscale PGM of values in `[0, 1]`, row-major.
pub fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "raster size");
    let mut out = Vec::new();
    let mut header = String::new();
    write!(header, "P5\n{width} {height}\n255\n").expect("string write");
    out.extend_from_slice(header.as_bytes());
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use hsi_ldm_core::hsicube::generate_toy_cube;

    fn p() -> &'static Path {
        Path::new("test.bin")
    }

    #[test]
    fn minimal_cube_round_trip() {
        let mut bytes = b"HSC1".to_vec();
        for d in [4u32, 1, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for v in [0.1f32, 0.2, 0.3, 0.4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1u16.to_le_bytes());
        let cube = decode_cube(p(), &bytes).unwrap();
        assert_eq!(cube.data(), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(cube.labels(), &[1]);
        assert_eq!(encode_cube(&cube), bytes);
    }

    #[test]
    fn cube_errors_are_classified() {
        let (cube, _) = generate_toy_cube(3, 8, (6, 5), 1).unwrap();
        let bytes = encode_cube(&cube);
        assert!(matches!(decode_cube(p(), &bytes[..bytes.len() - 3]), Err(CliError::Io { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cube(p(), &bad), Err(CliError::Format { .. })));
        let mut zero = bytes;
        zero[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_cube(p(), &zero), Err(CliError::Format { .. })));
    }

    #[test]
    fn captions_round_trip() {
        let (_, corpus) = generate_toy_cube(3, 8, (6, 6), 2).unwrap();
        let text = encode_captions(&corpus);
        assert_eq!(decode_captions(p(), &text).unwrap(), corpus);
        assert!(matches!(decode_captions(p(), "{\"class_id\":1}"), Err(CliError::Format { .. })));
        let odd = "{\"class_id\":1,\"caption\":\"x\",\"granularity\":\"medium\"}";
        assert!(decode_captions(p(), odd).is_err());
    }

    #[test]
    fn vae_round_trip_is_exact_in_f32() {
        let vae = Vae::new(VaeConfig { hidden: 5, ..VaeConfig::new(6) }, &mut hsi_ldm_core::rng_stream(3, 0)).unwrap();
        let bytes = encode_vae(&vae);
        let back = decode_vae(p(), &bytes).unwrap();
        assert_eq!(encode_vae(&back), bytes);
        assert_eq!(back.config, vae.config);
        let mut other = bytes.clone();
        other[4] = 7;
        assert!(decode_vae(p(), &other).is_err());
    }

    #[test]
    fn ldm_round_trip_is_exact() {
        let cfg = LdmConfig { side: 3, dim: 8, heads: 2, blocks: 1, text_layers: 1, vocab_size: 10, steps: 20, beta_min: 1e-4, beta_max: 0.02 };
        let (_, base) = LdmModel::new(cfg, &mut hsi_ldm_core::rng_stream(1, 0)).unwrap();
        let mut ema = base.clone();
        ema.flat_mut()[0] += 0.5;
        let mut optimizer = AdamW::new(AdamWConfig::default(), base.len());
        optimizer.step = 3;
        optimizer.m[1] = 0.25;
        let ckpt = LdmCheckpoint { config: cfg, latent_scale: 1.7, epoch: 12, base, ema, optimizer };
        let bytes = encode_ldm(&ckpt);
        assert_eq!(decode_ldm(p(), &bytes).unwrap(), ckpt);
        assert!(matches!(decode_ldm(p(), &bytes[..bytes.len() - 1]), Err(CliError::Io { .. })));
    }

    #[test]
    fn pgm_header_and_scaling() {
        let img = pgm(&[0.0, 0.5, 1.0, 2.0], 2, 2);
        assert!(img.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&img[img.len() - 4..], &[0, 128, 255, 255]);
    }
}
