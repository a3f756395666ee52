//! JPEG / JPEG2000 / WebP baseline wrappers.
//!
//! Encoders are reached through a pluggable adapter. The default adapter
//! shells out to a Python interpreter with Pillow (`SCMP_PYTHON` overrides
//! the interpreter path); a replay adapter serves encodes recorded in the
//! repository so tests stay hermetic when no codec tools are installed.
//! Bitrates are always measured from the produced file bytes, header
//! included, never from nominal quality settings.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StandardCodec {
    Jpeg,
    Jpeg2000,
    Webp,
}

impl StandardCodec {
    pub fn name(self) -> &'static str {
        match self {
            StandardCodec::Jpeg => "jpeg",
            StandardCodec::Jpeg2000 => "jpeg2000",
            StandardCodec::Webp => "webp",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            StandardCodec::Jpeg => "jpg",
            StandardCodec::Jpeg2000 => "jp2",
            StandardCodec::Webp => "webp",
        }
    }

    pub const ALL: [StandardCodec; 3] = [
        StandardCodec::Jpeg,
        StandardCodec::Jpeg2000,
        StandardCodec::Webp,
    ];
}

impl std::str::FromStr for StandardCodec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg" | "jpg" => Ok(StandardCodec::Jpeg),
            "jpeg2000" | "jp2" => Ok(StandardCodec::Jpeg2000),
            "webp" => Ok(StandardCodec::Webp),
            other => Err(Error::Config(format!(
                "unknown codec '{other}' (expected jpeg, jpeg2000, or webp)"
            ))),
        }
    }
}

impl std::fmt::Display for StandardCodec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One matched-bitrate encode request.
#[derive(Debug, Clone)]
pub struct CodecRequest {
    pub codec: StandardCodec,
    pub target_bpp: f64,
    /// Relative tolerance on the achieved bitrate.
    pub tolerance: f64,
    /// Inclusive quality-parameter bounds (1..=100 across all codecs).
    pub quality_bounds: (u32, u32),
}

impl CodecRequest {
    pub fn new(codec: StandardCodec, target_bpp: f64) -> Result<Self> {
        if target_bpp <= 0.0 {
            return Err(Error::Config(format!(
                "target bpp must be positive, got {target_bpp}"
            )));
        }
        Ok(Self {
            codec,
            target_bpp,
            tolerance: 0.10,
            quality_bounds: (1, 100),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncodeOutcome {
    pub quality: u32,
    pub bytes: Vec<u8>,
    pub reconstruction: image::RgbImage,
    /// 8 * file size / (H * W), file header included.
    pub bpp: f64,
}

pub trait CodecAdapter {
    /// Errors with an install hint when the codec is not usable.
    fn check_available(&self, codec: StandardCodec) -> Result<()>;
    fn encode_decode(
        &self,
        image: &image::RgbImage,
        codec: StandardCodec,
        quality: u32,
    ) -> Result<(Vec<u8>, image::RgbImage)>;
}

/// Encode at a fixed quality and measure the real file bitrate.
pub fn encode_standard(
    adapter: &dyn CodecAdapter,
    image: &image::RgbImage,
    codec: StandardCodec,
    quality: u32,
) -> Result<EncodeOutcome> {
    let (bytes, reconstruction) = adapter.encode_decode(image, codec, quality)?;
    if reconstruction.dimensions() != image.dimensions() {
        return Err(Error::Tool(format!(
            "{codec} reconstruction dims {:?} differ from input {:?}",
            reconstruction.dimensions(),
            image.dimensions()
        )));
    }
    let (w, h) = image.dimensions();
    let bpp = 8.0 * bytes.len() as f64 / (w as f64 * h as f64);
    Ok(EncodeOutcome {
        quality,
        bytes,
        reconstruction,
        bpp,
    })
}

/// Bisect the integer quality parameter until the measured bitrate is within
/// tolerance of the target or the bounds are exhausted (at most 20 probes).
/// Ties prefer the smaller file; targets outside the achievable range error
/// with that range.
pub fn search_quality_for_bpp(
    adapter: &dyn CodecAdapter,
    image: &image::RgbImage,
    request: &CodecRequest,
) -> Result<EncodeOutcome> {
    adapter.check_available(request.codec)?;
    let (mut lo, mut hi) = request.quality_bounds;
    if lo == 0 || lo > hi || hi > 100 {
        return Err(Error::Config(format!(
            "quality bounds must satisfy 1 <= lo <= hi <= 100, got {lo}..={hi}"
        )));
    }
    let target = request.target_bpp;
    let rel = |bpp: f64| (bpp - target).abs() / target;
    let better = |a: &EncodeOutcome, b: &EncodeOutcome| {
        let (ra, rb) = (rel(a.bpp), rel(b.bpp));
        ra < rb || (ra == rb && a.bytes.len() < b.bytes.len())
    };

    let low = encode_standard(adapter, image, request.codec, lo)?;
    let high = encode_standard(adapter, image, request.codec, hi)?;
    if target < low.bpp && rel(low.bpp) > request.tolerance {
        return Err(Error::Config(format!(
            "target {target} bpp unreachable for {} (achievable range {:.6}..{:.6} bpp)",
            request.codec, low.bpp, high.bpp
        )));
    }
    if target > high.bpp && rel(high.bpp) > request.tolerance {
        return Err(Error::Config(format!(
            "target {target} bpp unreachable for {} (achievable range {:.6}..{:.6} bpp)",
            request.codec, low.bpp, high.bpp
        )));
    }
    let mut best = if better(&low, &high) {
        low.clone()
    } else {
        high.clone()
    };
    let mut probes = 2usize;
    while hi - lo > 1 && probes < 20 && rel(best.bpp) > request.tolerance {
        let mid = lo + (hi - lo) / 2;
        let out = encode_standard(adapter, image, request.codec, mid)?;
        probes += 1;
        if better(&out, &best) {
            best = out.clone();
        }
        // quality -> size is monotone non-decreasing
        if out.bpp < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Shells out to a Python interpreter with Pillow. The interpreter path
/// comes from `SCMP_PYTHON`, defaulting to `python3`.
pub struct PillowAdapter {
    python: String,
}

impl PillowAdapter {
    pub fn from_env() -> Self {
        Self {
            python: std::env::var("SCMP_PYTHON").unwrap_or_else(|_| "python3".into()),
        }
    }
}

impl Default for PillowAdapter {
    fn default() -> Self {
        Self::from_env()
    }
}

const ENCODE_SCRIPT: &str = r#"
import sys
from PIL import Image
src, dst, rec, codec, q = sys.argv[1], sys.argv[2], sys.argv[3], sys.argv[4], int(sys.argv[5])
im = Image.open(src).convert('RGB')
if codec == 'jpeg':
    im.save(dst, 'JPEG', quality=q)
elif codec == 'webp':
    im.save(dst, 'WEBP', quality=q, method=4)
elif codec == 'jpeg2000':
    ratio = 1 + (100 - q) * 5
    im.save(dst, 'JPEG2000', quality_mode='rates', quality_layers=[ratio], irreversible=True)
else:
    raise SystemExit('unknown codec: ' + codec)
Image.open(dst).convert('RGB').save(rec, 'PNG')
"#;

const CHECK_SCRIPT: &str = r#"
import sys
from PIL import features
feat = {'jpeg': 'jpg', 'webp': 'webp', 'jpeg2000': 'jpg_2000'}[sys.argv[1]]
sys.exit(0 if features.check(feat) else 1)
"#;

impl CodecAdapter for PillowAdapter {
    fn check_available(&self, codec: StandardCodec) -> Result<()> {
        let status = Command::new(&self.python)
            .arg("-c")
            .arg(CHECK_SCRIPT)
            .arg(codec.name())
            .output();
        match status {
            Ok(out) if out.status.success() => Ok(()),
            Ok(_) => Err(Error::Environment(format!(
                "{} support missing in Pillow; install with: pip install pillow \
                 (or point SCMP_PYTHON at an interpreter that has it)",
                codec
            ))),
            Err(e) => Err(Error::Environment(format!(
                "cannot run '{}': {e}; install python3 + pillow or set SCMP_PYTHON",
                self.python
            ))),
        }
    }

    fn encode_decode(
        &self,
        image: &image::RgbImage,
        codec: StandardCodec,
        quality: u32,
    ) -> Result<(Vec<u8>, image::RgbImage)> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
        let src = dir.path().join("src.png");
        let dst = dir.path().join(format!("out.{}", codec.extension()));
        let rec = dir.path().join("rec.png");
        image
            .save(&src)
            .map_err(|e| Error::Tool(format!("writing {}: {e}", src.display())))?;
        let out = Command::new(&self.python)
            .arg("-c")
            .arg(ENCODE_SCRIPT)
            .arg(&src)
            .arg(&dst)
            .arg(&rec)
            .arg(codec.name())
            .arg(quality.to_string())
            .output()
            .map_err(|e| Error::Environment(format!("cannot run '{}': {e}", self.python)))?;
        if !out.status.success() {
            return Err(Error::Tool(format!(
                "{codec} encode at quality {quality} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        let bytes = std::fs::read(&dst).map_err(|e| Error::io(&dst, e))?;
        let recon = image::open(&rec)
            .map_err(|e| Error::Tool(format!("decoding reconstruction: {e}")))?
            .to_rgb8();
        Ok((bytes, recon))
    }
}

fn golden_key(image: &image::RgbImage, codec: StandardCodec, quality: u32) -> String {
    let mut hasher = Sha256::new();
    let (w, h) = image.dimensions();
    hasher.update(codec.name().as_bytes());
    hasher.update(quality.to_be_bytes());
    hasher.update(w.to_be_bytes());
    hasher.update(h.to_be_bytes());
    hasher.update(image.as_raw());
    let digest = hasher.finalize();
    let mut key = String::new();
    for b in &digest[..8] {
        let _ = write!(key, "{b:02x}");
    }
    key
}

/// Replays encodes recorded under a directory (`<key>.bin` + `<key>.png`
/// pairs keyed by a hash of the input, codec, and quality). Lets metric
/// tests run with no codec tools installed.
pub struct ReplayAdapter {
    dir: PathBuf,
}

impl ReplayAdapter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Record outcomes from another adapter so they can be replayed later.
    pub fn record(
        &self,
        inner: &dyn CodecAdapter,
        image: &image::RgbImage,
        codec: StandardCodec,
        quality: u32,
    ) -> Result<()> {
        let (bytes, recon) = inner.encode_decode(image, codec, quality)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let key = golden_key(image, codec, quality);
        let bin = self.dir.join(format!("{key}.bin"));
        std::fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let png = self.dir.join(format!("{key}.png"));
        recon
            .save(&png)
            .map_err(|e| Error::Tool(format!("writing {}: {e}", png.display())))?;
        Ok(())
    }
}

impl CodecAdapter for ReplayAdapter {
    fn check_available(&self, _codec: StandardCodec) -> Result<()> {
        if self.dir.is_dir() {
            Ok(())
        } else {
            Err(Error::Environment(format!(
                "replay directory {} not found",
                self.dir.display()
            )))
        }
    }

    fn encode_decode(
        &self,
        image: &image::RgbImage,
        codec: StandardCodec,
        quality: u32,
    ) -> Result<(Vec<u8>, image::RgbImage)> {
        let key = golden_key(image, codec, quality);
        let bin = self.dir.join(format!("{key}.bin"));
        if !bin.is_file() {
            return Err(Error::Environment(format!(
                "no recorded {codec} encode at quality {quality} under {}",
                self.dir.display()
            )));
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let png = self.dir.join(format!("{key}.png"));
        let recon = image::open(&png)
            .map_err(|e| Error::Tool(format!("reading {}: {e}", png.display())))?
            .to_rgb8();
        Ok((bytes, recon))
    }
}
