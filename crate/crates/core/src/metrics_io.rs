//! Masked image metrics, image files, the checkpoint and model containers
//! and the key=value config format.

use std::collections::BTreeMap;
use std::io::{BufReader, Cursor};
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::avatar::{Avatar, AvatarConfig, Group};
use crate::error::{invalid, Error, Result};
use crate::hash_blendshapes::HashConfig;
use crate::param_mesh::{Joint, ParametricHeadModel};
use crate::radiance_field::{FieldConfig, WarpConfig};
use crate::trainer::{Adam, TrainState};
use crate::uv_net::UVNetConfig;
use crate::volume_renderer::RgbImage;
use crate::Vec3;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MASK_EROSION: usize = 2;
pub const MASK_BLUR_SIGMA: f64 = 1.0;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"AVHM";
pub const MODEL_VERSION: u32 = 1;

fn check_pair(pred: &RgbImage, target: &RgbImage, mask: &[f64]) -> Result<()> {
    if pred.width != target.width || pred.height != target.height {
        return invalid("images differ in size");
    }
    if mask.len() != pred.width * pred.height {
        return invalid("mask size does not match the images");
    }
    if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return invalid("mask values must lie in [0, 1]");
    }
    Ok(())
}

/// PSNR of the mask-weighted mean squared error, peak 1, capped at 99 dB.
pub fn masked_psnr(pred: &RgbImage, target: &RgbImage, mask: &[f64]) -> Result<f64> {
    check_pair(pred, target, mask)?;
    let weight: f64 = mask.iter().sum();
    if weight <= 0.0 {
        return invalid("mask is empty");
    }
    let se: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .zip(mask)
        .map(|((p, t), m)| m * (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum();
    let mse = se / (3.0 * weight);
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Unmasked PSNR.
pub fn psnr(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    masked_psnr(pred, target, &vec![1.0; pred.width * pred.height])
}

/// Normalised 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// SSIM map (Gaussian window, valid region) averaged over channels.
pub fn ssim_map(pred: &RgbImage, target: &RgbImage, window: usize, sigma: f64) -> Result<(Vec<f64>, usize, usize)> {
    let (w, h) = (pred.width, pred.height);
    if target.width != w || target.height != h {
        return invalid("images differ in size");
    }
    if window == 0 || window % 2 == 0 || w < window || h < window {
        return invalid("images must be at least as large as the odd SSIM window");
    }
    let k = gaussian_kernel(window, sigma);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (w + 1 - window, h + 1 - window);
    let mut map = vec![0.0; ow * oh];
    for c in 0..3 {
        let x: Vec<f64> = pred.data.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = target.data.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &k).0);
        for i in 0..map.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let s = ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            map[i] += s / 3.0;
        }
    }
    Ok((map, ow, oh))
}

/// Mask-weighted mean of the SSIM map; the mask is read at window centres.
pub fn masked_ssim(pred: &RgbImage, target: &RgbImage, mask: &[f64]) -> Result<f64> {
    check_pair(pred, target, mask)?;
    let (map, ow, oh) = ssim_map(pred, target, SSIM_WINDOW, SSIM_SIGMA)?;
    let r = SSIM_WINDOW / 2;
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let m = mask[(y + r) * pred.width + x + r];
            num += m * map[y * ow + x];
            den += m;
        }
    }
    if den <= 0.0 {
        return invalid("mask is empty");
    }
    Ok(num / den)
}

/// Foreground mask eroded by a disk of radius 2 px, then Gaussian smoothed
/// with σ = 1 px.
pub fn evaluation_mask(foreground: &[bool], width: usize, height: usize) -> Vec<f64> {
    let r = MASK_EROSION as i64;
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < width as i64 && y < height as i64 && foreground[y as usize * width + x as usize];
    let mut eroded = vec![0.0; width * height];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let keep = (-r..=r).all(|dy| (-r..=r).all(|dx| dx * dx + dy * dy > r * r || inside(x + dx, y + dy)));
            eroded[y as usize * width + x as usize] = if keep { 1.0 } else { 0.0 };
        }
    }
    let k = gaussian_kernel(7, MASK_BLUR_SIGMA);
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut rows = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            rows[y * width + x] = (0..7).map(|i| k[i] * eroded[y * width + clamp(x as i64 + i as i64 - 3, width)]).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = (0..7)
                .map(|i| k[i] * rows[clamp(y as i64 + i as i64 - 3, height) * width + x])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_bytes(img: &RgbImage) -> Vec<u8> {
    img.data.iter().flat_map(|p| p.map(quantize)).collect()
}

fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> RgbImage {
    RgbImage {
        width,
        height,
        data: bytes.chunks_exact(3).map(|c| [0, 1, 2].map(|i| c[i] as f64 / 255.0)).collect(),
    }
}

/// 8-bit RGB PNG.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&rgb_bytes(img)).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected 8-bit RGB png".into()));
    }
    Ok(from_bytes(info.width as usize, info.height as usize, &buf[..info.buffer_size()]))
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(rgb_bytes(img));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = || Error::Format("malformed ppm".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + 3 * w * h).ok_or_else(bad)?;
    Ok(from_bytes(w, h, data))
}

/// Write PNG or PPM by file extension.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(img),
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => decode_ppm(&bytes),
        _ => decode_png(&bytes),
    }
}

/// Parsed `key = value` lines with typed access and unknown-key rejection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl FromStr for KeyValues {
    type Err = Error;

    /// Blank lines and `#` comments are skipped; duplicate keys are errors.
    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return invalid(format!("line {}: expected key=value", n + 1));
            };
            let k = k.trim();
            if k.is_empty() {
                return invalid(format!("line {}: empty key", n + 1));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return invalid(format!("line {}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(Self { entries })
    }
}

impl KeyValues {
    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Remove and parse `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("field `{key}`: cannot parse `{v}`"))),
        }
    }

    /// Remove and parse a required key.
    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?.ok_or_else(|| Error::InvalidInput(format!("field `{key}`: missing")))
    }

    /// Overwrite `slot` when `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("field `{key}`: cannot parse list `{v}`"))),
        }
    }

    /// Error on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => invalid(format!("unknown key `{k}`")),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Lossless key=value form of an avatar configuration.
pub fn avatar_config_to_kv(c: &AvatarConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    kv.insert("uvnet.input_res", c.uvnet.input_res);
    kv.insert("uvnet.encoder", join(&c.uvnet.encoder));
    kv.insert("uvnet.decoder", join(&c.uvnet.decoder));
    kv.insert("uvnet.blendshapes", c.uvnet.blendshapes);
    kv.insert("uvnet.features", c.uvnet.features);
    let h = &c.field.hash;
    kv.insert("hash.levels", h.levels);
    kv.insert("hash.table_size", h.table_size);
    kv.insert("hash.features", h.features);
    kv.insert("hash.coarsest", h.coarsest);
    kv.insert("hash.finest", h.finest);
    let f = &c.field;
    kv.insert("field.features", f.features);
    kv.insert("field.pos_bands", f.pos_bands);
    kv.insert("field.dir_bands", f.dir_bands);
    kv.insert("field.hidden", f.hidden);
    kv.insert("field.hidden_layers", f.hidden_layers);
    kv.insert("field.k", f.k);
    let w = &c.warp;
    kv.insert("warp.width", w.width);
    kv.insert("warp.depth", w.depth);
    kv.insert("warp.head_width", w.head_width);
    kv.insert("warp.bands", w.bands);
    kv.insert("warp.latent_dim", w.latent_dim);
    kv.insert("frames", c.frames);
    kv.insert("table_init", format!("{:?}", c.table_init));
    kv.insert("feature_init", format!("{:?}", c.feature_init));
    kv
}

pub fn avatar_config_from_kv(kv: &mut KeyValues) -> Result<AvatarConfig> {
    let c = AvatarConfig {
        uvnet: UVNetConfig {
            input_res: kv.require("uvnet.input_res")?,
            encoder: kv.take_list("uvnet.encoder")?.unwrap_or_default(),
            decoder: kv.take_list("uvnet.decoder")?.unwrap_or_default(),
            blendshapes: kv.require("uvnet.blendshapes")?,
            features: kv.require("uvnet.features")?,
        },
        field: FieldConfig {
            hash: HashConfig {
                levels: kv.require("hash.levels")?,
                table_size: kv.require("hash.table_size")?,
                features: kv.require("hash.features")?,
                coarsest: kv.require("hash.coarsest")?,
                finest: kv.require("hash.finest")?,
            },
            features: kv.require("field.features")?,
            pos_bands: kv.require("field.pos_bands")?,
            dir_bands: kv.require("field.dir_bands")?,
            hidden: kv.require("field.hidden")?,
            hidden_layers: kv.require("field.hidden_layers")?,
            k: kv.require("field.k")?,
        },
        warp: WarpConfig {
            width: kv.require("warp.width")?,
            depth: kv.require("warp.depth")?,
            head_width: kv.require("warp.head_width")?,
            bands: kv.require("warp.bands")?,
            latent_dim: kv.require("warp.latent_dim")?,
        },
        frames: kv.require("frames")?,
        table_init: kv.require("table_init")?,
        feature_init: kv.require("feature_init")?,
    };
    c.validate()?;
    Ok(c)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.0.extend(x.to_le_bytes()));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend(v);
    }
    fn vec3s(&mut self, v: &[Vec3]) {
        self.f64s(&v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>());
    }
    fn seal(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verify magic, version and CRC trailer; position after the header.
    fn open(data: &'a [u8], magic: &[u8; 4], version: u32, what: &str) -> Result<Self> {
        if data.len() < 12 || &data[..4] != magic {
            return Err(Error::Format(format!("not a {what} file (bad magic)")));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Format(format!("{what} checksum mismatch (corrupt or truncated)")));
        }
        let mut r = Reader { data: body, pos: 4 };
        let v = r.u32()?;
        if v != version {
            return Err(Error::Format(format!("unsupported {what} version {v}, expected {version}")));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.data.len() - self.pos) {
            return Err(Error::Format("length field exceeds data".into()));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
    fn vec3s(&mut self) -> Result<Vec<Vec3>> {
        let v = self.f64s()?;
        if v.len() % 3 != 0 {
            return Err(Error::Format("vector array length not a multiple of 3".into()));
        }
        Ok(v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

/// AVHM container for a parametric head model.
pub fn model_to_bytes(m: &ParametricHeadModel) -> Vec<u8> {
    let mut w = Writer(MODEL_MAGIC.to_vec());
    w.u32(MODEL_VERSION);
    w.f64s(&[m.radius]);
    w.vec3s(&m.neutral_positions);
    w.u64(m.expression_basis.len() as u64);
    m.expression_basis.iter().for_each(|b| w.vec3s(b));
    w.u64(m.joints.len() as u64);
    for j in &m.joints {
        w.bytes(j.name.as_bytes());
        w.vec3s(&[j.pivot, j.axis]);
        w.f64s(&[j.limit]);
        w.f64s(&j.weights);
    }
    w.f64s(&m.uv_coords.iter().flatten().copied().collect::<Vec<_>>());
    w.u64(m.triangles.len() as u64);
    m.triangles.iter().flatten().for_each(|&i| w.u32(i));
    w.u64(m.anchor_indices.len() as u64);
    m.anchor_indices.iter().for_each(|&i| w.u64(i as u64));
    w.seal()
}

pub fn model_from_bytes(data: &[u8]) -> Result<ParametricHeadModel> {
    let mut r = Reader::open(data, MODEL_MAGIC, MODEL_VERSION, "model")?;
    let radius = *r.f64s()?.first().ok_or_else(|| Error::Format("missing radius".into()))?;
    let neutral_positions = r.vec3s()?;
    let nb = r.len(8)?;
    let expression_basis = (0..nb).map(|_| r.vec3s()).collect::<Result<_>>()?;
    let nj = r.len(8)?;
    let joints = (0..nj)
        .map(|_| {
            let name = r.string()?;
            let pa = r.vec3s()?;
            let limit = r.f64s()?;
            if pa.len() != 2 || limit.len() != 1 {
                return Err(Error::Format("malformed joint".into()));
            }
            Ok(Joint {
                name,
                pivot: pa[0],
                axis: pa[1],
                limit: limit[0],
                weights: r.f64s()?,
            })
        })
        .collect::<Result<_>>()?;
    let uv = r.f64s()?;
    let uv_coords = uv.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let nt = r.len(12)?;
    let triangles = (0..nt).map(|_| Ok([r.u32()?, r.u32()?, r.u32()?])).collect::<Result<_>>()?;
    let na = r.len(8)?;
    let anchor_indices = (0..na).map(|_| Ok(r.u64()? as usize)).collect::<Result<_>>()?;
    r.finish()?;
    let model = ParametricHeadModel {
        neutral_positions,
        expression_basis,
        joints,
        uv_coords,
        triangles,
        anchor_indices,
        radius,
    };
    model.validate().map_err(|e| Error::Format(format!("model fails validation: {e}")))?;
    Ok(model)
}

/// Lossless line-oriented text form of a model, for diffing.
pub fn model_dump_text(m: &ParametricHeadModel) -> String {
    let mut s = String::new();
    let v3 = |p: &Vec3| format!("{:?} {:?} {:?}", p.x, p.y, p.z);
    s += &format!("avhm {MODEL_VERSION}\nradius {:?}\n", m.radius);
    for p in &m.neutral_positions {
        s += &format!("v {}\n", v3(p));
    }
    for (b, basis) in m.expression_basis.iter().enumerate() {
        for p in basis {
            s += &format!("e {b} {}\n", v3(p));
        }
    }
    for j in &m.joints {
        s += &format!("joint {} pivot {} axis {} limit {:?}\n", j.name, v3(&j.pivot), v3(&j.axis), j.limit);
        s += &format!("weights {}\n", j.weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(" "));
    }
    for uv in &m.uv_coords {
        s += &format!("vt {:?} {:?}\n", uv[0], uv[1]);
    }
    for t in &m.triangles {
        s += &format!("f {} {} {}\n", t[0], t[1], t[2]);
    }
    s += &format!("anchors {}\n", join(&m.anchor_indices));
    s
}

/// AVCK container: config echo, model, step, every parameter group,
/// Adam moments and the RNG position, sealed with a CRC32.
pub fn checkpoint_to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.u32(CHECKPOINT_VERSION);
    w.bytes(avatar_config_to_kv(&state.avatar.config).to_text().as_bytes());
    w.bytes(&model_to_bytes(&state.avatar.model));
    w.u64(state.step);
    for g in Group::ALL {
        w.bytes(g.name().as_bytes());
        w.f64s(state.avatar.param(g));
        let i = g.index();
        w.u64(state.adam.t[i]);
        w.f64s(&state.adam.m[i]);
        w.f64s(&state.adam.v[i]);
    }
    w.0.extend(state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend(state.rng.get_word_pos().to_le_bytes());
    w.seal()
}

/// Parse a checkpoint. With `expected`, parameter shapes are checked
/// against that configuration instead of the stored one.
pub fn checkpoint_from_bytes(data: &[u8], expected: Option<&AvatarConfig>) -> Result<TrainState> {
    let mut r = Reader::open(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let text = r.string()?;
    let mut kv: KeyValues = text.parse().map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let stored = avatar_config_from_kv(&mut kv).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    kv.finish().map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let model = model_from_bytes(r.bytes()?)?;
    let config = expected.cloned().unwrap_or(stored);
    let mut avatar = Avatar::new(model, config, 0)?;
    let mut adam = Adam::new(&avatar);
    let step = r.u64()?;
    for g in Group::ALL {
        let name = r.string()?;
        if name != g.name() {
            return Err(Error::Format(format!("expected group `{}`, found `{name}`", g.name())));
        }
        let values = r.f64s()?;
        let slot = avatar.param_mut(g);
        if values.len() != slot.len() {
            return Err(Error::ShapeMismatch {
                group: g.name().into(),
                expected: slot.len().to_string(),
                found: values.len().to_string(),
            });
        }
        slot.copy_from_slice(&values);
        let i = g.index();
        adam.t[i] = r.u64()?;
        let (m, v) = (r.f64s()?, r.f64s()?);
        if m.len() != values.len() || v.len() != values.len() {
            return Err(Error::Format(format!("optimizer state of `{}` has the wrong length", g.name())));
        }
        adam.m[i] = m;
        adam.v[i] = v;
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    r.finish()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState { avatar, adam, step, rng })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    checkpoint_from_bytes(&read_file(path)?, None)
}

pub fn load_checkpoint_as(path: &Path, expected: &AvatarConfig) -> Result<TrainState> {
    checkpoint_from_bytes(&read_file(path)?, Some(expected))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
