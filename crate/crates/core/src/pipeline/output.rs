//! Metric, table and map files. Wall-clock timing never goes into a file so
//! that two runs with the same seed write identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::frame::{FrameMetrics, MapDump};
use super::harness::{AblationRow, SuiteMetrics, SweepRecord};
use super::model::Model;
use crate::detection::{detections_csv, Detection, DETECTIONS_CSV_HEADER};
use crate::error::{Error, Result};
use crate::gridcore::FeatureGrid;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub weights_hash: String,
    pub seed: u64,
    pub mode: String,
}

impl Provenance {
    pub fn of(cfg: &RunConfig, model: &Model) -> Self {
        Self {
            config_hash: cfg.hash(),
            weights_hash: model.weights_hash(),
            seed: cfg.seed(),
            mode: cfg.run.mode.name().to_string(),
        }
    }

    /// `# key=value` comment lines for the top of a CSV file.
    pub fn csv_header(&self) -> String {
        format!(
            "# config_hash={}\n# weights_hash={}\n# seed={}\n# mode={}\n",
            self.config_hash, self.weights_hash, self.seed, self.mode
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown output format {s:?}"))),
        }
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub const METRICS_CSV_HEADER: &str = "frame,ap50,ap70,bytes,log2_bytes,empty_volume,detections,ground_truth";

pub fn metrics_csv(prov: &Provenance, frames: &[FrameMetrics], summary: &SuiteMetrics) -> String {
    let mut s = prov.csv_header();
    let _ = writeln!(s, "# pooled_ap50={} pooled_ap70={} mean_bytes={} log2_bytes={}", summary.ap50, summary.ap70, summary.mean_bytes, summary.log2_bytes);
    s.push_str(METRICS_CSV_HEADER);
    s.push('\n');
    for m in frames {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.frame, m.ap50, m.ap70, m.bytes, m.log2_bytes, m.empty_volume, m.detections, m.ground_truth
        );
    }
    s
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    provenance: &'a Provenance,
    summary: &'a SuiteMetrics,
    frames: &'a [FrameMetrics],
}

pub fn metrics_json(prov: &Provenance, frames: &[FrameMetrics], summary: &SuiteMetrics) -> String {
    let doc = MetricsDoc {
        provenance: prov,
        summary,
        frames,
    };
    serde_json::to_string_pretty(&doc).expect("metrics serialize") + "\n"
}

pub const ABLATION_CSV_HEADER: &str = "label,pl,sif,dcm,rpp,iaf,tau,points,strategy,removed,ap50,ap70,log2_bytes";

pub fn ablation_csv(prov: &Provenance, rows: &[AblationRow]) -> String {
    let mut s = prov.csv_header();
    s.push_str(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let strategy = serde_json::to_value(r.strategy).expect("strategy serializes");
        let removed: Vec<String> = r
            .removed
            .iter()
            .map(|x| serde_json::to_value(x).expect("source serializes").as_str().unwrap_or_default().to_string())
            .collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            quote(&r.label),
            r.pl,
            r.sif,
            r.dcm,
            r.rpp,
            r.iaf,
            r.tau,
            r.points,
            strategy.as_str().unwrap_or_default(),
            removed.join("+"),
            r.ap50,
            r.ap70,
            r.log2_bytes
        );
    }
    s
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,ap50,ap70,log2_bytes";

pub fn sweep_csv(prov: &Provenance, records: &[SweepRecord]) -> String {
    let mut s = prov.csv_header();
    s.push_str(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.axis, r.value, r.ap50, r.ap70, r.log2_bytes);
    }
    s
}

pub fn detections_file(prov: &Provenance, frames: &[(usize, Vec<Detection>)]) -> String {
    let mut s = prov.csv_header();
    s.push_str(DETECTIONS_CSV_HEADER);
    s.push('\n');
    for (t, dets) in frames {
        s.push_str(&detections_csv(*t as u64, dets));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapHeader {
    pub name: String,
    pub dtype: String,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub order: String,
}

/// Writes `<name>.bin` (little-endian f64, channel-major) and `<name>.json`.
pub fn write_map(dir: &Path, map: &MapDump) -> Result<(PathBuf, PathBuf)> {
    let (c, h, w) = map.grid.shape();
    let header = MapHeader {
        name: map.name.clone(),
        dtype: "f64le".into(),
        shape: [c, h, w],
        order: "chw".into(),
    };
    let stem: String = map
        .name
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
        .collect();
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let bytes: Vec<u8> = map.grid.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes)?;
    fs::write(&json, serde_json::to_string_pretty(&header).expect("header serializes") + "\n")?;
    Ok((bin, json))
}

pub fn read_map(bin: &Path, json: &Path) -> Result<MapDump> {
    let header: MapHeader = serde_json::from_str(&fs::read_to_string(json)?)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    if header.dtype != "f64le" || header.order != "chw" {
        return Err(Error::Format(format!("unsupported map layout {} {}", header.dtype, header.order)));
    }
    let raw = fs::read(bin)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Format(format!("{} is not a whole number of f64", bin.display())));
    }
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let [c, h, w] = header.shape;
    Ok(MapDump {
        name: header.name,
        grid: FeatureGrid::new(c, h, w, data)?,
    })
}
