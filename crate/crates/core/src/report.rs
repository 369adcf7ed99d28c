//! Artifact emission: hash-tagged CSV/JSON/SVG/PGM files, a manifest, and
//! hand-written SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DiecError, Result};

pub const MANIFEST: &str = "manifest.json";
const HASH_KEY: &str = "config_hash";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// File name to hex SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An output directory whose every artifact carries one config hash.
#[derive(Debug)]
pub struct ArtifactDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactDir {
    /// Opens or creates `dir`; an existing manifest must carry `hash`.
    pub fn open(dir: &Path, hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
            if m.config_hash != hash {
                return Err(DiecError::Config(format!(
                    "{} holds artifacts for config {}, not {hash}",
                    dir.display(),
                    m.config_hash
                )));
            }
            m
        } else {
            Manifest { config_hash: hash.to_string(), files: BTreeMap::new() }
        };
        Ok(ArtifactDir { dir: dir.to_path_buf(), manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn hash(&self) -> &str {
        &self.manifest.config_hash
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Writes raw bytes and records them in the manifest.
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.manifest.files.insert(name.to_string(), sha256_hex(bytes));
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(self.dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("# {HASH_KEY}={}\n{body}", self.manifest.config_hash);
        self.write_bytes(name, text.as_bytes())
    }

    /// Serializes `value` (which must be a JSON object) with the hash added
    /// as a top-level key.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = tag_json(&self.manifest.config_hash, value)?;
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_svg(&mut self, name: &str, svg: &str) -> Result<()> {
        let tagged = svg.replacen("<svg ", &format!("<!-- {HASH_KEY}={} -->\n<svg ", self.manifest.config_hash), 1);
        self.write_bytes(name, tagged.as_bytes())
    }

    /// Inserts a comment line after the PNM magic.
    pub fn write_pnm(&mut self, name: &str, pnm: &[u8]) -> Result<()> {
        if pnm.len() < 3 || pnm[2] != b'\n' {
            return Err(DiecError::Format("not a PNM image".into()));
        }
        let mut out = pnm[..3].to_vec();
        out.extend(format!("# {HASH_KEY}={}\n", self.manifest.config_hash).as_bytes());
        out.extend(&pnm[3..]);
        self.write_bytes(name, &out)
    }
}

pub fn tag_json<T: Serialize>(hash: &str, value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    let obj = v.as_object_mut().ok_or_else(|| DiecError::Format("artifact JSON must be an object".into()))?;
    obj.insert(HASH_KEY.to_string(), serde_json::Value::String(hash.to_string()));
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// The 64-hex-digit hash following the first `config_hash` marker.
pub fn embedded_hash(bytes: &[u8]) -> Option<String> {
    let key = HASH_KEY.as_bytes();
    let at = bytes.windows(key.len()).position(|w| w == key)? + key.len();
    let rest = &bytes[at..];
    let start = rest.iter().position(|b| b.is_ascii_hexdigit())?;
    if rest[..start].iter().any(|b| !matches!(b, b'=' | b'"' | b':' | b' ')) {
        return None;
    }
    let hex: Vec<u8> = rest[start..].iter().take_while(|b| b.is_ascii_hexdigit()).copied().collect();
    (hex.len() == 64).then(|| String::from_utf8(hex).expect("ascii"))
}

/// Checks every manifest entry against its bytes and, for text artifacts,
/// its embedded hash. Returns the directory's config hash.
pub fn verify_artifacts(dir: &Path) -> Result<String> {
    let m: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?;
    for (name, digest) in &m.files {
        let bytes = std::fs::read(dir.join(name))?;
        if &sha256_hex(&bytes) != digest {
            return Err(DiecError::Config(format!("{name} was modified after it was written")));
        }
        let binary = name.ends_with(".dtf1");
        if !binary {
            match embedded_hash(&bytes) {
                Some(h) if h == m.config_hash => {}
                Some(h) => return Err(DiecError::Config(format!("{name} carries config hash {h}, expected {}", m.config_hash))),
                None => return Err(DiecError::Config(format!("{name} carries no config hash"))),
            }
        }
    }
    Ok(m.config_hash)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

const LOW: (f64, f64, f64) = (44.0, 123.0, 182.0);
const HIGH: (f64, f64, f64) = (215.0, 25.0, 28.0);

/// Linear two-colour ramp for `u` in `[0, 1]`.
pub fn ramp(u: f64) -> String {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let mix = |a: f64, b: f64| (a + (b - a) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(LOW.0, HIGH.0), mix(LOW.1, HIGH.1), mix(LOW.2, HIGH.2))
}

pub struct Heatmap<'a> {
    pub title: &'a str,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: &'a [Vec<f64>],
    pub highlight: Option<(usize, usize)>,
}

pub fn heatmap_svg(h: &Heatmap<'_>) -> Result<String> {
    if h.values.len() != h.rows.len() || h.values.iter().any(|r| r.len() != h.cols.len()) {
        return Err(DiecError::shape("heatmap values do not match labels"));
    }
    let (cw, ch, left, top) = (16.0, 22.0, 96.0, 40.0);
    let width = left + cw * h.cols.len() as f64 + 110.0;
    let height = top + ch * h.rows.len() as f64 + 56.0;
    let finite = h.values.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, esc(h.title)).unwrap();
    for (i, row) in h.values.iter().enumerate() {
        let y = top + ch * i as f64;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, y + ch * 0.65, esc(&h.rows[i])).unwrap();
        for (j, &v) in row.iter().enumerate() {
            let x = left + cw * j as f64;
            writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{}"><title>{} t={}: {}</title></rect>"#,
                ramp((v - lo) / span),
                esc(&h.rows[i]),
                esc(&h.cols[j]),
                num(v)
            )
            .unwrap();
        }
    }
    if let Some((i, j)) = h.highlight {
        let (x, y) = (left + cw * j as f64, top + ch * i as f64);
        writeln!(s, r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="none" stroke="black" stroke-width="2"/>"#).unwrap();
    }
    let step = h.cols.len().div_ceil(10).max(1);
    let base = top + ch * h.rows.len() as f64;
    for j in (0..h.cols.len()).step_by(step) {
        let x = left + cw * (j as f64 + 0.5);
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, base + 14.0, esc(&h.cols[j])).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">timestep</text>"#, left + cw * h.cols.len() as f64 / 2.0, base + 32.0).unwrap();
    let lx = left + cw * h.cols.len() as f64 + 20.0;
    for k in 0..10 {
        let y = top + k as f64 * 10.0;
        writeln!(s, r#"<rect x="{lx}" y="{y}" width="14" height="10" fill="{}"/>"#, ramp(1.0 - k as f64 / 9.0)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 18.0, top + 9.0, num(hi)).unwrap();
    writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 18.0, top + 99.0, num(lo)).unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub right_axis: bool,
    pub dashed: bool,
}

pub struct LineChart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub y2_label: Option<&'a str>,
    pub series: Vec<Series>,
    /// Vertical markers at x positions.
    pub markers: Vec<(f64, String)>,
}

fn extent<'a>(pts: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = pts.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn line_chart_svg(c: &LineChart<'_>) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 360.0, 70.0, 70.0, 36.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let xs = extent(c.series.iter().flat_map(|s| s.points.iter().map(|p| &p.0)));
    let y1 = extent(c.series.iter().filter(|s| !s.right_axis).flat_map(|s| s.points.iter().map(|p| &p.1)));
    let y2 = extent(c.series.iter().filter(|s| s.right_axis).flat_map(|s| s.points.iter().map(|p| &p.1)));
    let px = |x: f64| left + (x - xs.0) / (xs.1 - xs.0) * pw;
    let py = |y: f64, r: (f64, f64)| top + ph - (y - r.0) / (r.1 - r.0) * ph;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, esc(c.title)).unwrap();
    writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##).unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let x = xs.0 + f * (xs.1 - xs.0);
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(x), top + ph + 14.0, num(x)).unwrap();
        let y = y1.0 + f * (y1.1 - y1.0);
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, py(y, y1) + 4.0, num(y)).unwrap();
        if c.y2_label.is_some() {
            let y = y2.0 + f * (y2.1 - y2.0);
            writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 4.0, py(y, y2) + 4.0, num(y)).unwrap();
        }
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, esc(c.x_label)).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, top + ph / 2.0, top + ph / 2.0, esc(c.y_label)).unwrap();
    if let Some(l) = c.y2_label {
        let x = w - 10.0;
        writeln!(s, r#"<text x="{x}" y="{}" transform="rotate(90 {x} {})" text-anchor="middle">{}</text>"#, top + ph / 2.0, top + ph / 2.0, esc(l)).unwrap();
    }
    for (x, label) in &c.markers {
        let x = px(*x);
        writeln!(s, r##"<line x1="{x}" y1="{top}" x2="{x}" y2="{}" stroke="#888" stroke-dasharray="2,3"/>"##, top + ph).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 3.0, top + 12.0, esc(label)).unwrap();
    }
    for (i, ser) in c.series.iter().enumerate() {
        let r = if ser.right_axis { y2 } else { y1 };
        let pts: Vec<String> =
            ser.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y, r))).collect();
        let dash = if ser.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="1.6"{dash} points="{}"/>"#, ser.color, pts.join(" ")).unwrap();
        let ly = top + 14.0 * (i as f64 + 1.0);
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"{dash}/>"#, left + 8.0, left + 28.0, ser.color).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, left + 32.0, ly + 4.0, esc(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
