//! Borehole records, site tables, CSV ingestion and a seeded synthetic site
//! generator.

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{
    generate_site, generate_site_with_truth, ParamModel, SpatialField, SynthSiteConfig, Zone, DEFAULT_LOADINGS,
    DEFAULT_PARAMS,
};

/// The eleven soil parameters, in CSV column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Param {
    /// Degree of saturation, %.
    Sr,
    /// Total unit weight, kN/m³.
    GammaT,
    /// Void ratio.
    E,
    /// Liquid limit, %.
    LL,
    /// Plastic limit, %.
    PL,
    /// Water content, %.
    W,
    /// Undrained shear strength, kPa.
    Su,
    /// Undrained Young's modulus, kPa.
    Eu,
    /// Preconsolidation stress, kPa.
    SigmaP,
    /// Compression index.
    Cc,
    /// Coefficient of consolidation, cm²/day.
    Cv,
}

pub const N_PARAMS: usize = 11;

impl Param {
    pub const ALL: [Param; N_PARAMS] = [
        Param::Sr,
        Param::GammaT,
        Param::E,
        Param::LL,
        Param::PL,
        Param::W,
        Param::Su,
        Param::Eu,
        Param::SigmaP,
        Param::Cc,
        Param::Cv,
    ];
    /// Costly, sparsely measured.
    pub const MECHANICAL: [Param; 5] = [Param::Su, Param::Eu, Param::SigmaP, Param::Cc, Param::Cv];
    /// Cheap, measured almost everywhere.
    pub const INDEX: [Param; 6] = [Param::Sr, Param::GammaT, Param::E, Param::LL, Param::PL, Param::W];

    pub fn index(self) -> usize {
        self as usize
    }

    /// CSV column name.
    pub fn name(self) -> &'static str {
        match self {
            Param::Sr => "Sr",
            Param::GammaT => "gamma_t",
            Param::E => "e",
            Param::LL => "LL",
            Param::PL => "PL",
            Param::W => "w",
            Param::Su => "su",
            Param::Eu => "Eu",
            Param::SigmaP => "sigma_p",
            Param::Cc => "Cc",
            Param::Cv => "cv",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_mechanical(self) -> bool {
        Param::MECHANICAL.contains(&self)
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exact CSV header.
pub const CSV_HEADER: [&str; 16] = [
    "site_id", "borehole_id", "x", "y", "depth", "Sr", "gamma_t", "e", "LL", "PL", "w", "su", "Eu", "sigma_p", "Cc", "cv",
];

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("header mismatch: {0}")]
    Header(String),
    #[error("line {line}, column {column}: {message}")]
    Cell { line: u64, column: String, message: String },
    #[error("line {line}: {message}")]
    Invariant { line: u64, message: String },
    #[error("line {line}: duplicate record {site}/{borehole} at depth {depth}")]
    Duplicate { line: u64, site: String, borehole: String, depth: f64 },
    #[error("invalid site config: {0}")]
    InvalidConfig(String),
    #[error("verification region contains no records")]
    EmptyRegion,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One sampled depth in one borehole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoreholeRecord {
    pub site_id: String,
    pub borehole_id: String,
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    /// Indexed by `Param::index`; `None` is a missing measurement.
    pub params: [Option<f64>; N_PARAMS],
}

impl BoreholeRecord {
    pub fn get(&self, p: Param) -> Option<f64> {
        self.params[p.index()]
    }

    pub fn set(&mut self, p: Param, v: Option<f64>) {
        self.params[p.index()] = v;
    }

    /// Mechanical parameters this record lacks, in canonical order.
    pub fn missing_mechanical(&self) -> Vec<Param> {
        Param::MECHANICAL.into_iter().filter(|p| self.get(*p).is_none()).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("x", self.x), ("y", self.y), ("depth", self.depth)] {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.depth < 0.0 {
            return Err(format!("depth {} is negative", self.depth));
        }
        for p in Param::ALL {
            if let Some(v) = self.get(p) {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(format!("{p} = {v} must be positive and finite"));
                }
            }
        }
        if let (Some(pl), Some(ll)) = (self.get(Param::PL), self.get(Param::LL)) {
            if pl > ll {
                return Err(format!("PL = {pl} exceeds LL = {ll}"));
            }
        }
        Ok(())
    }
}

/// Axis-aligned closed rectangle in site coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

/// Ordered records plus a label saying which database or site they are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteTable {
    pub label: String,
    records: Vec<BoreholeRecord>,
}

impl SiteTable {
    /// Checks every record and the uniqueness of (site, borehole, depth).
    pub fn new(label: impl Into<String>, records: Vec<BoreholeRecord>) -> Result<Self, GeoError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let line = i as u64 + 2;
            r.validate().map_err(|message| GeoError::Invariant { line, message })?;
            if !seen.insert((r.site_id.as_str(), r.borehole_id.as_str(), r.depth.to_bits())) {
                return Err(GeoError::Duplicate {
                    line,
                    site: r.site_id.clone(),
                    borehole: r.borehole_id.clone(),
                    depth: r.depth,
                });
            }
        }
        Ok(Self { label: label.into(), records })
    }

    pub fn empty(label: impl Into<String>) -> Self {
        Self { label: label.into(), records: Vec::new() }
    }

    pub fn records(&self) -> &[BoreholeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Borehole ids in order of first appearance.
    pub fn borehole_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.borehole_id.as_str()))
            .map(|r| r.borehole_id.clone())
            .collect()
    }

    pub fn borehole<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a BoreholeRecord> + 'a {
        self.records.iter().filter(move |r| r.borehole_id == id)
    }

    /// Records for which `keep` holds, under a new label.
    pub fn filter(&self, label: impl Into<String>, mut keep: impl FnMut(&BoreholeRecord) -> bool) -> Self {
        Self { label: label.into(), records: self.records.iter().filter(|r| keep(r)).cloned().collect() }
    }

    /// Concatenation; fails if the union has duplicate keys.
    pub fn concat(label: impl Into<String>, parts: &[&SiteTable]) -> Result<Self, GeoError> {
        Self::new(label, parts.iter().flat_map(|t| t.records.iter().cloned()).collect())
    }
}

/// Splits `table` by a closed rectangle: inside goes to the verification
/// table, the rest stays as the local database.
pub fn split_verification(table: &SiteTable, region: &Region) -> Result<(SiteTable, SiteTable), GeoError> {
    let (inside, outside): (Vec<_>, Vec<_>) =
        table.records.iter().cloned().partition(|r| region.contains(r.x, r.y));
    if inside.is_empty() {
        return Err(GeoError::EmptyRegion);
    }
    Ok((
        SiteTable { label: format!("{}:bid", table.label), records: outside },
        SiteTable { label: format!("{}:verification", table.label), records: inside },
    ))
}

fn parse_number(field: &str, line: u64, column: &str) -> Result<f64, GeoError> {
    field.trim().parse::<f64>().map_err(|e| GeoError::Cell {
        line,
        column: column.to_string(),
        message: format!("cannot parse {field:?} as a number ({e})"),
    })
}

/// Reads a site table from CSV text. Empty cells are missing measurements.
pub fn read_csv<R: Read>(reader: R, label: impl Into<String>) -> Result<SiteTable, GeoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    for (i, name) in header.iter().enumerate() {
        if !CSV_HEADER.contains(&name) {
            return Err(GeoError::Header(format!("unknown column {name:?} at position {}", i + 1)));
        }
        if CSV_HEADER.get(i) != Some(&name) {
            return Err(GeoError::Header(format!("column {name:?} at position {}, expected {:?}", i + 1, CSV_HEADER.get(i))));
        }
    }
    if header.len() != CSV_HEADER.len() {
        return Err(GeoError::Header(format!("expected {} columns, found {}", CSV_HEADER.len(), header.len())));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let required = |i: usize| -> Result<f64, GeoError> {
            let f = &row[i];
            if f.trim().is_empty() {
                return Err(GeoError::Cell { line, column: CSV_HEADER[i].into(), message: "required value is empty".into() });
            }
            parse_number(f, line, CSV_HEADER[i])
        };
        let mut rec = BoreholeRecord {
            site_id: row[0].to_string(),
            borehole_id: row[1].to_string(),
            x: required(2)?,
            y: required(3)?,
            depth: required(4)?,
            params: [None; N_PARAMS],
        };
        for p in Param::ALL {
            let col = 5 + p.index();
            let f = &row[col];
            if !f.trim().is_empty() {
                rec.params[p.index()] = Some(parse_number(f, line, CSV_HEADER[col])?);
            }
        }
        rec.validate().map_err(|message| GeoError::Invariant { line, message })?;
        if !seen.insert((rec.site_id.clone(), rec.borehole_id.clone(), rec.depth.to_bits())) {
            return Err(GeoError::Duplicate { line, site: rec.site_id, borehole: rec.borehole_id, depth: rec.depth });
        }
        records.push(rec);
    }
    Ok(SiteTable { label: label.into(), records })
}

pub fn load_csv(path: &Path) -> Result<SiteTable, GeoError> {
    let file = std::fs::File::open(path).map_err(|source| GeoError::Io { path: path.display().to_string(), source })?;
    let label = path.file_stem().map_or_else(|| "site".to_string(), |s| s.to_string_lossy().into_owned());
    read_csv(std::io::BufReader::new(file), label)
}

/// Writes with shortest round-trip formatting, so reading back is exact.
pub fn write_csv<W: Write>(table: &SiteTable, writer: W) -> Result<(), GeoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in &table.records {
        let mut row = vec![r.site_id.clone(), r.borehole_id.clone(), r.x.to_string(), r.y.to_string(), r.depth.to_string()];
        row.extend(r.params.iter().map(|v| v.map_or_else(String::new, |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| GeoError::Io { path: "<csv writer>".into(), source })?;
    Ok(())
}

pub fn save_csv(table: &SiteTable, path: &Path) -> Result<(), GeoError> {
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    std::fs::write(path, buf).map_err(|source| GeoError::Io { path: path.display().to_string(), source })
}

/// Rounds to `digits` significant decimal digits.
pub fn round_significant(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let text = format!("{:.*e}", (digits - 1) as usize, v);
    text.parse().unwrap_or(v)
}
