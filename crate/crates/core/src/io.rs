//! File formats: the DMT1 tensor container, PPM frames, timeline JSON and
//! model checkpoints.
//!
//! A DMT1 record is the magic `DMT1`, a `u16` version, a `u8` rank, `rank`
//! little-endian `u32` dims and a little-endian `f32` row-major payload. A
//! multi-tensor file is a run of records followed by a JSON index, its `u64`
//! byte length and the magic `DMTJ`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView3, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conditioning::{ConditionKind, ConditionSpec, Timeline};
use crate::dit::{DitConfig, ModelParams};
use crate::error::{Error, Result};
use crate::toy_vae::{LatentVideo, PixelVideo};

pub const MAGIC: &[u8; 4] = b"DMT1";
pub const INDEX_MAGIC: &[u8; 4] = b"DMTJ";
pub const VERSION: u16 = 1;

pub fn write_record<W: Write>(out: &mut W, t: &ArrayD<f64>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.ndim())));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[t.ndim() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_record<R: Read>(input: &mut R) -> Result<ArrayD<f64>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing DMT1 magic".into()));
    }
    let mut v = [0u8; 2];
    input.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut rank = [0u8; 1];
    input.read_exact(&mut rank)?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        input.read_exact(&mut d)?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    input.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format(e.to_string()))
}

/// Index entry of a multi-tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub offset: u64,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    #[serde(default)]
    meta: Value,
    tensors: Vec<IndexEntry>,
}

/// Named tensors plus file-level metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub meta: Value,
    pub tensors: Vec<(String, ArrayD<f64>, Value)>,
}

impl TensorFile {
    pub fn push(&mut self, name: &str, t: ArrayD<f64>) {
        self.tensors.push((name.to_string(), t, Value::Null));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, ..)| n == name).map(|(_, t, _)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t, meta) in &self.tensors {
            entries.push(IndexEntry {
                name: name.clone(),
                offset: out.len() as u64,
                dims: t.shape().to_vec(),
                meta: meta.clone(),
            });
            write_record(&mut out, t)?;
        }
        let index = serde_json::to_vec(&Index {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        out.extend_from_slice(&index);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(INDEX_MAGIC);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let n = bytes.len();
        if n < 12 || &bytes[n - 4..] != INDEX_MAGIC {
            // A bare record without an index.
            let t = read_record(&mut &bytes[..])?;
            return Ok(Self {
                meta: Value::Null,
                tensors: vec![("tensor".into(), t, Value::Null)],
            });
        }
        let len = u64::from_le_bytes(bytes[n - 12..n - 4].try_into().expect("eight bytes")) as usize;
        let start = (n - 12)
            .checked_sub(len)
            .ok_or_else(|| Error::Format("index length exceeds file".into()))?;
        let index: Index = serde_json::from_slice(&bytes[start..n - 12])?;
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for e in index.tensors {
            let off = e.offset as usize;
            if off >= start {
                return Err(Error::Format(format!("tensor `{}` offset past data", e.name)));
            }
            let t = read_record(&mut &bytes[off..start])?;
            if t.shape() != e.dims.as_slice() {
                return Err(Error::Format(format!("tensor `{}` dims disagree with index", e.name)));
            }
            tensors.push((e.name, t, e.meta));
        }
        Ok(Self {
            meta: index.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_tensor(path: &Path, t: &ArrayD<f64>) -> Result<()> {
    let mut out = Vec::new();
    write_record(&mut out, t)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// First tensor of a bare record or multi-tensor file.
pub fn load_tensor(path: &Path) -> Result<ArrayD<f64>> {
    TensorFile::load(path)?
        .tensors
        .into_iter()
        .next()
        .map(|(_, t, _)| t)
        .ok_or_else(|| Error::Format(format!("{} holds no tensors", path.display())))
}

pub fn to_dyn4(a: &Array4<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

pub fn into4(t: ArrayD<f64>) -> Result<Array4<f64>> {
    t.into_dimensionality()
        .map_err(|_| Error::Format("expected a rank-4 tensor".into()))
}

/// Latent tensor plus its temporal compression, as one file.
pub fn save_latent(path: &Path, z: &LatentVideo) -> Result<()> {
    let mut f = TensorFile {
        meta: serde_json::json!({
            "stride": z.tc.stride(),
            "pixel_len": z.tc.pixel_len(),
            "patch": z.patch,
        }),
        ..TensorFile::default()
    };
    f.push("latent", to_dyn4(&z.data));
    f.save(path)
}

pub fn load_latent(path: &Path) -> Result<LatentVideo> {
    let f = TensorFile::load(path)?;
    let field = |k: &str| {
        f.meta
            .get(k)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("latent file lacks `{k}`")))
    };
    let tc = crate::latent_geometry::TemporalCompression::new(field("stride")?, field("pixel_len")?)?;
    let data = into4(
        f.get("latent")
            .cloned()
            .ok_or_else(|| Error::Format("latent file lacks `latent`".into()))?,
    )?;
    LatentVideo::new(data, tc, field("patch")?)
}

/// Writes one `[H, W, 3]` frame in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, frame: ArrayView3<'_, f64>) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in frame.iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Array3<f64>> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format("only 8-bit P6 is supported".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format("bad PPM size".into()));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM payload".into()))?;
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        data[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

/// Writes `dir/frame_0000.ppm`, ... and returns the paths.
pub fn export_frames(dir: &Path, video: &PixelVideo) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..video.len())
        .map(|f| {
            let p = dir.join(format!("frame_{f:04}.ppm"));
            write_ppm(&p, video.frame(f))?;
            Ok(p)
        })
        .collect()
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        reason: reason.into(),
    }
}

fn uint(obj: &serde_json::Map<String, Value>, key: &str, path: &str) -> Result<usize> {
    let field = format!("{path}{key}");
    match obj.get(key) {
        None => Err(schema(field, "required field is missing")),
        Some(x) => x
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| schema(field, format!("expected a non-negative integer, got {x}"))),
    }
}

/// Parses and validates timeline JSON. Payload paths are resolved against
/// `base`; images are `[H, W, 3]` tensors and clips `[T, H, W, 3]`.
/// Anchors are left as written; snapping happens at layout time.
pub fn parse_timeline(text: &str, base: &Path) -> Result<Timeline> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema("$", format!("not valid JSON: {e}")))?;
    let obj = root.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "total_frames" | "prompt_id" | "conditions") {
            return Err(schema(key.clone(), "unknown field"));
        }
    }
    let total = uint(obj, "total_frames", "")?;
    if total == 0 {
        return Err(schema("total_frames", "must be at least 1"));
    }
    let prompt = uint(obj, "prompt_id", "")?;
    let conds = obj
        .get("conditions")
        .ok_or_else(|| schema("conditions", "required field is missing"))?
        .as_array()
        .ok_or_else(|| schema("conditions", "expected an array"))?;
    let mut tl = Timeline::new(total, prompt);
    for (i, c) in conds.iter().enumerate() {
        let path = format!("conditions[{i}].");
        let co = c
            .as_object()
            .ok_or_else(|| schema(format!("conditions[{i}]"), "expected an object"))?;
        for key in co.keys() {
            if !matches!(key.as_str(), "kind" | "anchor_frame" | "payload") {
                return Err(schema(format!("{path}{key}"), "unknown field"));
            }
        }
        let kind = match co.get("kind") {
            None => return Err(schema(format!("{path}kind"), "required field is missing")),
            Some(Value::String(s)) if s == "image" => ConditionKind::Image,
            Some(Value::String(s)) if s == "clip" => ConditionKind::Clip,
            Some(x) => {
                return Err(schema(
                    format!("{path}kind"),
                    format!("expected \"image\" or \"clip\", got {x}"),
                ))
            }
        };
        let anchor = uint(co, "anchor_frame", &path)?;
        if anchor >= total {
            return Err(schema(
                format!("{path}anchor_frame"),
                format!("{anchor} is not below total_frames {total}"),
            ));
        }
        let payload = match co.get("payload") {
            None => return Err(schema(format!("{path}payload"), "required field is missing")),
            Some(Value::String(s)) => base.join(s),
            Some(x) => return Err(schema(format!("{path}payload"), format!("expected a path, got {x}"))),
        };
        let t = load_tensor(&payload)
            .map_err(|e| schema(format!("{path}payload"), format!("{}: {e}", payload.display())))?;
        let bad_rank = |want: usize| {
            schema(
                format!("{path}payload"),
                format!("expected a rank-{want} tensor, got dims {:?}", t.shape()),
            )
        };
        let spec = match kind {
            ConditionKind::Image => {
                let img: Array3<f64> = t.clone().into_dimensionality().map_err(|_| bad_rank(3))?;
                ConditionSpec::image(anchor, img).map_err(|e| schema(format!("{path}payload"), e.to_string()))?
            }
            ConditionKind::Clip => {
                let v: Array4<f64> = t.clone().into_dimensionality().map_err(|_| bad_rank(4))?;
                let len = v.dim().0;
                if anchor + len > total {
                    return Err(schema(
                        format!("{path}payload"),
                        format!("clip of {len} frames at {anchor} runs past total_frames {total}"),
                    ));
                }
                let video = PixelVideo::new(v, 8.0).map_err(|e| schema(format!("{path}payload"), e.to_string()))?;
                ConditionSpec::clip(anchor, video)
            }
        };
        tl.conditions.push(spec);
    }
    Ok(tl)
}

pub fn load_timeline(path: &Path) -> Result<Timeline> {
    let text = fs::read_to_string(path)?;
    parse_timeline(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes a timeline's payloads next to `path` and the JSON itself.
pub fn save_timeline(path: &Path, tl: &Timeline) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("timeline");
    let mut conds = Vec::new();
    for (i, c) in tl.conditions.iter().enumerate() {
        let crate::conditioning::ConditionPayload::Pixels(v) = &c.payload else {
            return Err(Error::Invalid(
                "latent conditions cannot be written to a timeline".into(),
            ));
        };
        let name = format!("{stem}_cond{i}.dmt");
        let t = match c.kind {
            ConditionKind::Image => v.frame(0).to_owned().into_dyn(),
            ConditionKind::Clip => v.frames().clone().into_dyn(),
        };
        save_tensor(&dir.join(&name), &t)?;
        conds.push(serde_json::json!({
            "kind": match c.kind { ConditionKind::Image => "image", ConditionKind::Clip => "clip" },
            "anchor_frame": c.anchor_frame,
            "payload": name,
        }));
    }
    let doc = serde_json::json!({
        "total_frames": tl.total_frames,
        "prompt_id": tl.prompt_id,
        "conditions": conds,
    });
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Parameters plus arbitrary metadata, one tensor per parameter.
pub fn save_params(path: &Path, meta: Value, params: &ModelParams) -> Result<()> {
    let mut f = TensorFile {
        meta,
        ..TensorFile::default()
    };
    for (name, t) in params.names().iter().zip(params.tensors()) {
        f.push(name, t.clone().into_dyn());
    }
    f.save(path)
}

pub fn load_params(path: &Path) -> Result<(Value, ModelParams)> {
    let f = TensorFile::load(path)?;
    let mut names = Vec::with_capacity(f.tensors.len());
    let mut tensors = Vec::with_capacity(f.tensors.len());
    for (name, t, _) in f.tensors {
        let m: Array2<f64> = t
            .into_dimensionality()
            .map_err(|_| Error::Format(format!("tensor `{name}` is not a matrix")))?;
        names.push(name);
        tensors.push(m);
    }
    Ok((f.meta, ModelParams::from_parts(names, tensors)))
}

pub fn save_checkpoint(path: &Path, cfg: &DitConfig, params: &ModelParams) -> Result<()> {
    save_params(path, serde_json::json!({ "config": cfg }), params)
}

/// Loads a checkpoint and checks its tensors against the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(DitConfig, ModelParams)> {
    let (meta, params) = load_params(path)?;
    let cfg: DitConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks its config".into()))?,
    )?;
    params.check_layout(&cfg)?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_layout_is_byte_exact() {
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![1.0, -0.5]).unwrap();
        let mut out = Vec::new();
        write_record(&mut out, &t).unwrap();
        let mut want = b"DMT1".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(2);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(out, want);
        assert_eq!(read_record(&mut &out[..]).unwrap(), t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(read_record(&mut &b"XXXX\x01\x00\x00"[..]).is_err());
        assert!(read_record(&mut &b"DMT1\x09\x00\x00"[..]).is_err());
        assert!(TensorFile::from_bytes(b"short").is_err());
    }

    #[test]
    fn multi_tensor_file_round_trips() {
        let mut f = TensorFile {
            meta: serde_json::json!({"k": 1}),
            ..TensorFile::default()
        };
        f.push("a", ArrayD::from_elem(IxDyn(&[3]), 0.25));
        f.push("b", ArrayD::from_elem(IxDyn(&[2, 2, 1]), -2.0));
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], b"DMTJ");
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DitConfig::tiny();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let p = dir.path().join("m.dmt");
        save_checkpoint(&p, &cfg, &params).unwrap();
        let (c2, p2) = load_checkpoint(&p).unwrap();
        assert_eq!(c2, cfg);
        for (a, b) in params.tensors().iter().zip(p2.tensors()) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-6));
        }
        let mut wrong = DitConfig::tiny();
        wrong.embed_dim = 8;
        let mut f = TensorFile::load(&p).unwrap();
        f.meta = serde_json::json!({ "config": wrong });
        f.save(&p).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn ppm_round_trips_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 3), |(y, x, c)| ((y * 5 + x) * 3 + c) as f64 / 45.0);
        let p = dir.path().join("f.ppm");
        write_ppm(&p, img.view()).unwrap();
        let back = read_ppm(&p).unwrap();
        assert!((&back - &img).iter().all(|d| d.abs() <= 0.5 / 255.0 + 1e-12));
        assert!(fs::read(&p).unwrap().starts_with(b"P6\n5 3\n255\n"));
    }

    fn write_timeline_fixture(dir: &Path) {
        save_tensor(&dir.join("img.dmt"), &ArrayD::from_elem(IxDyn(&[4, 4, 3]), 0.5)).unwrap();
        save_tensor(&dir.join("clip.dmt"), &ArrayD::from_elem(IxDyn(&[3, 4, 4, 3]), 0.2)).unwrap();
    }

    fn schema_field(text: &str, dir: &Path) -> String {
        match parse_timeline(text, dir) {
            Err(Error::Schema { field, .. }) => field,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn valid_timeline_parses() {
        let dir = tempfile::tempdir().unwrap();
        write_timeline_fixture(dir.path());
        let tl = parse_timeline(
            r#"{"total_frames": 17, "prompt_id": 2, "conditions": [
                {"kind": "image", "anchor_frame": 0, "payload": "img.dmt"},
                {"kind": "clip", "anchor_frame": 9, "payload": "clip.dmt"}]}"#,
            dir.path(),
        )
        .unwrap();
        assert_eq!(tl.total_frames, 17);
        assert_eq!(tl.conditions.len(), 2);
        assert_eq!(tl.conditions[1].kind, ConditionKind::Clip);

        let p = dir.path().join("t.json");
        save_timeline(&p, &tl).unwrap();
        assert_eq!(load_timeline(&p).unwrap(), tl);
    }

    #[test]
    fn each_violation_class_names_its_field() {
        let dir = tempfile::tempdir().unwrap();
        write_timeline_fixture(dir.path());
        let d = dir.path();
        let img = r#"{"kind": "image", "anchor_frame": 0, "payload": "img.dmt"}"#;
        let cases = [
            ("not json".to_string(), "$"),
            ("[]".to_string(), "$"),
            (r#"{"prompt_id": 0, "conditions": []}"#.to_string(), "total_frames"),
            (r#"{"total_frames": "9", "prompt_id": 0, "conditions": []}"#.to_string(), "total_frames"),
            (r#"{"total_frames": 0, "prompt_id": 0, "conditions": []}"#.to_string(), "total_frames"),
            (r#"{"total_frames": 9, "conditions": []}"#.to_string(), "prompt_id"),
            (r#"{"total_frames": 9, "prompt_id": -1, "conditions": []}"#.to_string(), "prompt_id"),
            (r#"{"total_frames": 9, "prompt_id": 0}"#.to_string(), "conditions"),
            (r#"{"total_frames": 9, "prompt_id": 0, "conditions": {}}"#.to_string(), "conditions"),
            (r#"{"total_frames": 9, "prompt_id": 0, "conditions": [], "fps": 8}"#.to_string(), "fps"),
            (format!(r#"{{"total_frames": 9, "prompt_id": 0, "conditions": [{img}, 3]}}"#), "conditions[1]"),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"anchor_frame": 0, "payload": "img.dmt"}]}"#.to_string(),
                "conditions[0].kind",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "video", "anchor_frame": 0, "payload": "img.dmt"}]}"#.to_string(),
                "conditions[0].kind",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "image", "anchor_frame": 9, "payload": "img.dmt"}]}"#.to_string(),
                "conditions[0].anchor_frame",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "image", "payload": "img.dmt"}]}"#.to_string(),
                "conditions[0].anchor_frame",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "image", "anchor_frame": 0}]}"#.to_string(),
                "conditions[0].payload",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "image", "anchor_frame": 0, "payload": "nope.dmt"}]}"#.to_string(),
                "conditions[0].payload",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "image", "anchor_frame": 0, "payload": "clip.dmt"}]}"#.to_string(),
                "conditions[0].payload",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "clip", "anchor_frame": 8, "payload": "clip.dmt"}]}"#.to_string(),
                "conditions[0].payload",
            ),
            (
                r#"{"total_frames": 9, "prompt_id": 0, "conditions": [{"kind": "image", "anchor_frame": 0, "payload": "img.dmt", "x": 1}]}"#.to_string(),
                "conditions[0].x",
            ),
        ];
        for (text, field) in cases {
            assert_eq!(schema_field(&text, d), field, "{text}");
        }
    }

    proptest! {
        #[test]
        fn records_round_trip_f32_values(dims in prop::collection::vec(1usize..4, 0..4), seed in 0u64..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 as f64 / 7.0).collect();
            let data: Vec<f64> = data.into_iter().map(|v| v as f32 as f64).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
            let mut out = Vec::new();
            write_record(&mut out, &t).unwrap();
            prop_assert_eq!(out.len(), 7 + 4 * dims.len() + 4 * n);
            prop_assert_eq!(read_record(&mut &out[..]).unwrap(), t);
        }
    }
}
