//! Text configuration format: UTF-8, line-based `key = value` pairs grouped
//! under `[section]` headers. `#` starts a comment, blank lines are ignored,
//! and values keep interior whitespace. Errors carry the 1-based line number
//! of the offending line, and every consumer rejects keys it does not know.
//!
//! Repeated sections of the same name express lists (e.g. one `[primitive]`
//! per phantom shape). Vector-valued keys hold whitespace-separated numbers.
//!
//! This module owns the generic parser plus the loaders for the core domain
//! objects (scan geometry, reconstruction grid, phantom description,
//! simulation settings). Higher-level run manifests add their own sections
//! on top of the same format.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::{uniform_angles, ScanGeometry};
use crate::voxvol::{Axis, Grid3, PhantomSpec, Primitive, PrimitiveKind};
use crate::xsim::{build_spectrum, SimOptions, Spectrum};

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// One `[name]` block and the entries under it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// A parsed configuration file: sections in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    sections: Vec<Section>,
}

impl Manifest {
    /// Parse configuration text. Keys may not repeat within a section;
    /// sections of the same name may repeat freely.
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let t = stripped.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(inner) = t.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line, "section header missing closing ']'"))?
                    .trim();
                if name.is_empty() {
                    return Err(parse_err(line, "empty section name"));
                }
                sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| parse_err(line, "expected `key = value` or `[section]`"))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(parse_err(line, "empty key"));
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| parse_err(line, "key/value before any [section] header"))?;
            if section.entries.iter().any(|e| e.key == key) {
                return Err(parse_err(
                    line,
                    format!("duplicate key `{key}` in [{}]", section.name),
                ));
            }
            section.entries.push(Entry {
                line,
                key: key.to_string(),
                value: value.to_string(),
            });
        }
        Ok(Manifest { sections })
    }

    /// All sections with the given name, in file order.
    pub fn all(&self, name: &str) -> Vec<&Section> {
        self.sections.iter().filter(|s| s.name == name).collect()
    }

    /// The single section with the given name; absent or repeated is an
    /// error.
    pub fn one(&self, name: &str) -> Result<&Section> {
        match self.optional(name)? {
            Some(s) => Ok(s),
            None => Err(Error::invalid(format!("missing [{name}] section"))),
        }
    }

    /// At most one section with the given name.
    pub fn optional(&self, name: &str) -> Result<Option<&Section>> {
        let found = self.all(name);
        match found.len() {
            0 => Ok(None),
            1 => Ok(Some(found[0])),
            _ => Err(parse_err(
                found[1].line,
                format!("section [{name}] given more than once"),
            )),
        }
    }

    /// Every section, in file order.
    pub fn sections(&self) -> &[Section] {
        &self.sections
    }
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse { line, msg: msg.to_string() }
}

/// Consumes a section's entries one key at a time and rejects leftovers, so
/// misspelled or unsupported keys fail loudly instead of being ignored.
pub struct SectionReader<'a> {
    section: &'a Section,
    taken: Vec<bool>,
}

impl<'a> SectionReader<'a> {
    pub fn new(section: &'a Section) -> SectionReader<'a> {
        SectionReader { taken: vec![false; section.entries.len()], section }
    }

    /// The section's header line (for error messages about missing keys).
    pub fn header_line(&self) -> usize {
        self.section.line
    }

    fn take(&mut self, key: &str) -> Option<&'a Entry> {
        let idx = self.section.entries.iter().position(|e| e.key == key)?;
        self.taken[idx] = true;
        Some(&self.section.entries[idx])
    }

    /// Raw string value, required.
    pub fn require(&mut self, key: &str) -> Result<&'a str> {
        match self.take(key) {
            Some(e) => Ok(&e.value),
            None => Err(parse_err(
                self.section.line,
                format!("[{}] missing required key `{key}`", self.section.name),
            )),
        }
    }

    /// Raw string value, optional.
    pub fn optional(&mut self, key: &str) -> Option<&'a str> {
        self.take(key).map(|e| e.value.as_str())
    }

    /// Required scalar parsed via `FromStr`.
    pub fn req_num<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let e = match self.take(key) {
            Some(e) => e,
            None => {
                return Err(parse_err(
                    self.section.line,
                    format!("[{}] missing required key `{key}`", self.section.name),
                ))
            }
        };
        parse_scalar(e)
    }

    /// Optional scalar parsed via `FromStr`.
    pub fn opt_num<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            Some(e) => parse_scalar(e).map(Some),
            None => Ok(None),
        }
    }

    /// Required triple of whitespace-separated floats.
    pub fn req_vec3(&mut self, key: &str) -> Result<[f64; 3]> {
        let e = match self.take(key) {
            Some(e) => e,
            None => {
                return Err(parse_err(
                    self.section.line,
                    format!("[{}] missing required key `{key}`", self.section.name),
                ))
            }
        };
        parse_vec3(e)
    }

    /// Optional triple of whitespace-separated floats.
    pub fn opt_vec3(&mut self, key: &str) -> Result<Option<[f64; 3]>> {
        match self.take(key) {
            Some(e) => parse_vec3(e).map(Some),
            None => Ok(None),
        }
    }

    /// Optional boolean (`true`/`false`).
    pub fn opt_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            Some(e) => match e.value.as_str() {
                "true" => Ok(Some(true)),
                "false" => Ok(Some(false)),
                other => Err(parse_err(e.line, format!("`{key}`: expected true/false, got `{other}`"))),
            },
            None => Ok(None),
        }
    }

    /// Errors on the first entry no consumer asked for.
    pub fn finish(self) -> Result<()> {
        for (e, &taken) in self.section.entries.iter().zip(&self.taken) {
            if !taken {
                return Err(parse_err(
                    e.line,
                    format!("unknown key `{}` in [{}]", e.key, self.section.name),
                ));
            }
        }
        Ok(())
    }
}

fn parse_scalar<T: FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| {
        parse_err(
            e.line,
            format!("`{}`: cannot parse `{}` as {}", e.key, e.value, std::any::type_name::<T>()),
        )
    })
}

fn parse_vec3(e: &Entry) -> Result<[f64; 3]> {
    let parts: Vec<f64> = e
        .value
        .split_whitespace()
        .map(|p| {
            p.parse()
                .map_err(|_| parse_err(e.line, format!("`{}`: bad number `{p}`", e.key)))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(parse_err(
            e.line,
            format!("`{}`: expected 3 numbers, got {}", e.key, parts.len()),
        ));
    }
    Ok([parts[0], parts[1], parts[2]])
}

// ---------------------------------------------------------------------------
// Domain-object loaders
// ---------------------------------------------------------------------------

/// Load the scan geometry from a `[geometry]` section:
/// `sdd_mm`, `sid_mm`, `nu`, `nv`, `pitch_u_mm`, `pitch_v_mm`, `n_views`,
/// optional `arc_deg` (default 360).
pub fn geometry_from(m: &Manifest) -> Result<ScanGeometry> {
    let mut r = SectionReader::new(m.one("geometry")?);
    let sdd = r.req_num::<f64>("sdd_mm")?;
    let sid = r.req_num::<f64>("sid_mm")?;
    let nu = r.req_num::<usize>("nu")?;
    let nv = r.req_num::<usize>("nv")?;
    let pu = r.req_num::<f64>("pitch_u_mm")?;
    let pv = r.req_num::<f64>("pitch_v_mm")?;
    let n_views = r.req_num::<usize>("n_views")?;
    let arc_deg = r.opt_num::<f64>("arc_deg")?.unwrap_or(360.0);
    r.finish()?;
    ScanGeometry::new(sdd, sid, (nu, nv), (pu, pv), uniform_angles(n_views, arc_deg.to_radians()))
}

/// Load the reconstruction grid from a `[grid]` section: `nx`, `ny`, `nz`,
/// `spacing_mm` (one or three numbers), optional `origin_mm` (default:
/// centred on the isocenter).
pub fn grid_from(m: &Manifest) -> Result<Grid3> {
    let mut r = SectionReader::new(m.one("grid")?);
    let nx = r.req_num::<usize>("nx")?;
    let ny = r.req_num::<usize>("ny")?;
    let nz = r.req_num::<usize>("nz")?;
    let raw = r.require("spacing_mm")?;
    let line = r.header_line();
    let parts: Vec<f64> = raw
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| parse_err(line, format!("`spacing_mm`: bad number `{p}`"))))
        .collect::<Result<_>>()?;
    let spacing = match parts.len() {
        1 => [parts[0]; 3],
        3 => [parts[0], parts[1], parts[2]],
        n => return Err(parse_err(line, format!("`spacing_mm`: expected 1 or 3 numbers, got {n}"))),
    };
    let origin = r.opt_vec3("origin_mm")?;
    r.finish()?;
    match origin {
        Some(o) => Grid3::new([nx, ny, nz], spacing, o),
        None => Grid3::centered([nx, ny, nz], spacing),
    }
}

/// Load a phantom description. An optional `[phantom]` section carries
/// `out_of_fov_offset_mm`; each `[primitive]` section contributes one shape:
/// `role` (body|metal), `kind` (sphere|box|elliptic_cylinder|cylinder_x|
/// cylinder_y|cylinder_z), `center_mm`, `size_mm`, optional `rot_z_deg`,
/// `hu`.
pub fn phantom_from(m: &Manifest) -> Result<PhantomSpec> {
    let mut spec = PhantomSpec {
        body: Vec::new(),
        metal: Vec::new(),
        out_of_fov_offset_mm: None,
    };
    if let Some(s) = m.optional("phantom")? {
        let mut r = SectionReader::new(s);
        spec.out_of_fov_offset_mm = r.opt_vec3("out_of_fov_offset_mm")?;
        r.finish()?;
    }
    for s in m.all("primitive") {
        let mut r = SectionReader::new(s);
        let role = r.require("role")?;
        let kind_raw = r.require("kind")?;
        let kind = match kind_raw {
            "sphere" => PrimitiveKind::Sphere,
            "box" => PrimitiveKind::Box,
            "elliptic_cylinder" => PrimitiveKind::EllipticCylinder,
            "cylinder_x" => PrimitiveKind::CappedCylinder(Axis::X),
            "cylinder_y" => PrimitiveKind::CappedCylinder(Axis::Y),
            "cylinder_z" => PrimitiveKind::CappedCylinder(Axis::Z),
            other => {
                return Err(parse_err(s.line, format!("unknown primitive kind `{other}`")))
            }
        };
        let prim = Primitive {
            kind,
            center_mm: r.req_vec3("center_mm")?,
            size_mm: r.req_vec3("size_mm")?,
            rot_z_deg: r.opt_num::<f64>("rot_z_deg")?.unwrap_or(0.0),
            hu: r.req_num::<f64>("hu")?,
        };
        match role {
            "body" => spec.body.push(prim),
            "metal" => spec.metal.push(prim),
            other => {
                return Err(parse_err(s.line, format!("primitive role must be body|metal, got `{other}`")))
            }
        }
        r.finish()?;
    }
    Ok(spec)
}

/// Simulation settings from a `[simulate]` section: `photons`, optional
/// `seed` (default 0), optional `noise` (default false), and the source
/// spectrum as either `mono_kev` or `kvp` (+ optional `n_bins`, default 10).
pub fn simulation_from(m: &Manifest) -> Result<(Spectrum, SimOptions)> {
    let mut r = SectionReader::new(m.one("simulate")?);
    let photons = r.req_num::<u32>("photons")?;
    let seed = r.opt_num::<u64>("seed")?.unwrap_or(0);
    let noise = r.opt_bool("noise")?.unwrap_or(false);
    let mono = r.opt_num::<f64>("mono_kev")?;
    let kvp = r.opt_num::<f64>("kvp")?;
    let n_bins = r.opt_num::<usize>("n_bins")?;
    let line = r.header_line();
    r.finish()?;
    let spectrum = match (mono, kvp) {
        (Some(e), None) => {
            if n_bins.is_some() {
                return Err(parse_err(line, "`n_bins` only applies with `kvp`"));
            }
            Spectrum::mono(e)?
        }
        (None, Some(k)) => build_spectrum(k, n_bins.unwrap_or(10))?,
        (None, None) => return Err(parse_err(line, "[simulate] needs `mono_kev` or `kvp`")),
        (Some(_), Some(_)) => {
            return Err(parse_err(line, "`mono_kev` and `kvp` are mutually exclusive"))
        }
    };
    Ok((spectrum, SimOptions { photons_per_pixel: photons, seed, noise }))
}
