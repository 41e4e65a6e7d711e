//! Dataset and checkpoint JSON, kernel CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gnn::GnnParams;
use crate::graph::{Graph, GraphDataset, Mode};
use crate::kernel::{KernelMatrix, Provenance};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphRecord {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRecord {
    d: usize,
    mode: Mode,
    graphs: Vec<GraphRecord>,
    labels: Vec<f64>,
}

fn graph_from_record(i: usize, d: usize, rec: &GraphRecord) -> Result<Graph> {
    let here = |field: &str| format!("graphs[{i}].{field}");
    if rec.num_nodes == 0 {
        return Err(LabError::schema(here("num_nodes"), "must be at least 1"));
    }
    if rec.features.len() != rec.num_nodes {
        return Err(LabError::schema(
            here("features"),
            format!("{} feature rows for {} nodes", rec.features.len(), rec.num_nodes),
        ));
    }
    let mut data = Vec::with_capacity(d * rec.num_nodes);
    for (u, f) in rec.features.iter().enumerate() {
        if f.len() != d {
            return Err(LabError::schema(
                format!("graphs[{i}].features[{u}]"),
                format!("length {} but d = {d}", f.len()),
            ));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(LabError::schema(
                format!("graphs[{i}].features[{u}]"),
                "non-finite value",
            ));
        }
        data.extend_from_slice(f);
    }
    let edges: Vec<(usize, usize)> = rec.edges.iter().map(|e| (e[0], e[1])).collect();
    Graph::new(DMatrix::from_vec(d, rec.num_nodes, data), &edges).map_err(|e| match e {
        LabError::Schema { location, message } => LabError::Schema {
            location: format!("graphs[{i}].{location}"),
            message,
        },
        other => other,
    })
}

/// Parses the dataset JSON layout
/// `{"d", "mode", "graphs": [{"num_nodes", "edges", "features"}], "labels"}`.
pub fn parse_dataset(text: &str) -> Result<GraphDataset> {
    let rec: DatasetRecord = serde_json::from_str(text)?;
    if rec.d == 0 {
        return Err(LabError::schema("d", "must be at least 1"));
    }
    if rec.graphs.is_empty() {
        return Err(LabError::schema("graphs", "at least one graph is required"));
    }
    let graphs = rec
        .graphs
        .iter()
        .enumerate()
        .map(|(i, g)| graph_from_record(i, rec.d, g))
        .collect::<Result<Vec<_>>>()?;
    if rec.labels.iter().any(|v| !v.is_finite()) {
        return Err(LabError::schema("labels", "non-finite label"));
    }
    GraphDataset::new(rec.mode, graphs, rec.labels)
}

pub fn load_dataset(path: &Path) -> Result<GraphDataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn dataset_to_json(ds: &GraphDataset) -> Result<String> {
    let rec = DatasetRecord {
        d: ds.dim(),
        mode: ds.mode(),
        graphs: ds
            .graphs()
            .iter()
            .map(|g| GraphRecord {
                num_nodes: g.num_nodes(),
                edges: g.edges().into_iter().map(|(u, v)| [u, v]).collect(),
                features: g
                    .features()
                    .column_iter()
                    .map(|c| c.iter().copied().collect())
                    .collect(),
            })
            .collect(),
        labels: ds.labels().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&rec)?)
}

pub fn save_dataset(ds: &GraphDataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_json(ds)?)?;
    Ok(())
}

/// Network parameters as JSON; `W` is stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub d: usize,
    pub m: usize,
    pub bias: f64,
    pub kappa: f64,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub a: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(p: &GnnParams) -> Self {
        Self {
            d: p.d(),
            m: p.m(),
            bias: p.bias(),
            kappa: p.kappa(),
            w: p.w().as_slice().to_vec(),
            a: p.a().to_vec(),
        }
    }

    pub fn to_params(&self) -> Result<GnnParams> {
        if self.w.len() != self.d * self.m {
            return Err(LabError::schema(
                "W",
                format!("{} entries for d = {}, m = {}", self.w.len(), self.d, self.m),
            ));
        }
        GnnParams::new(
            DMatrix::from_column_slice(self.d, self.m, &self.w),
            self.a.clone(),
            self.bias,
            self.kappa,
        )
    }
}

pub fn save_checkpoint(p: &GnnParams, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(&Checkpoint::from_params(p))?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GnnParams> {
    let c: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    c.to_params()
}

/// Row-major CSV preceded by a `# provenance: ...` line.
pub fn kernel_to_csv(k: &KernelMatrix) -> String {
    let mut out = format!("# provenance: {}\n", k.provenance());
    for row in k.matrix().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Reads a square CSV matrix (comment lines starting with `#` are skipped).
pub fn parse_kernel_csv(text: &str) -> Result<KernelMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::schema(format!("line {}", lineno + 1), format!("bad number {c:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(LabError::schema("kernel", "empty matrix"));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(LabError::schema(
            format!("row {i}"),
            format!("{} columns in a {n}-row matrix", r.len()),
        ));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
        .fold(0.0_f64, f64::max);
    if asym > 1e-10 * m.norm() {
        return Err(LabError::domain(format!(
            "kernel is not symmetric (max asymmetry {asym:e})"
        )));
    }
    KernelMatrix::from_matrix(m, Provenance::Analytic)
}

/// Writes to `path`, or to stdout when `path` is `None`.
pub fn write_output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, contents)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::init_params;
    use crate::graph::{generate_separated_dataset, GeneratorSpec};

    #[test]
    fn dataset_round_trip() {
        let ds = generate_separated_dataset(&GeneratorSpec::graph_mode(3, 4, 3, 0.2, 0.5, 7)).unwrap();
        let back = parse_dataset(&dataset_to_json(&ds).unwrap()).unwrap();
        assert_eq!(ds, back);
        let node = generate_separated_dataset(&GeneratorSpec::node_mode(5, 3, 0.2, 0.5, 7)).unwrap();
        assert_eq!(node, parse_dataset(&dataset_to_json(&node).unwrap()).unwrap());
    }

    #[test]
    fn edge_out_of_range_names_graph_and_edge() {
        let text = r#"{"d": 1, "mode": "graph", "graphs": [
            {"num_nodes": 2, "edges": [[0, 1]], "features": [[1.0], [2.0]]},
            {"num_nodes": 2, "edges": [[0, 1], [1, 2]], "features": [[1.0], [2.0]]}
        ], "labels": [0.0, 1.0]}"#;
        match parse_dataset(text).unwrap_err() {
            LabError::Schema { location, .. } => assert_eq!(location, "graphs[1].edges[1]"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_count_checked() {
        let text = r#"{"d": 1, "mode": "graph", "graphs": [
            {"num_nodes": 1, "edges": [], "features": [[1.0]]}
        ], "labels": [0.0, 1.0]}"#;
        assert!(matches!(parse_dataset(text), Err(LabError::Schema { .. })));
        let bad_width = r#"{"d": 2, "mode": "graph", "graphs": [
            {"num_nodes": 1, "edges": [], "features": [[1.0]]}
        ], "labels": [0.0]}"#;
        match parse_dataset(bad_width).unwrap_err() {
            LabError::Schema { location, .. } => assert_eq!(location, "graphs[0].features[0]"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(3, 5, 0.25, 0.5, 1).unwrap();
        let c = Checkpoint::from_params(&p);
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"W\""));
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_params().unwrap(), p);
    }

    #[test]
    fn kernel_csv_round_trip() {
        let k = KernelMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.125, 0.125, 1.0 / 3.0]),
            Provenance::MonteCarlo {
                m: 10,
                seed: 2,
                bias: 0.0,
            },
        )
        .unwrap();
        let text = kernel_to_csv(&k);
        assert!(text.starts_with("# provenance: monte_carlo(m=10, seed=2"));
        assert_eq!(parse_kernel_csv(&text).unwrap().matrix(), k.matrix());
    }
}
