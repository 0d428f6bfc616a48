//! Dataset representation, CSV ingestion and the near-plaque gene filter.
//!
//! A [`Dataset`] holds one [`Sample`] per tissue section. Each sample carries
//! its outcome locations (plaques, with a scalar outcome) and its predictor
//! locations (cells, with an expression vector and a cell-type label). The two
//! sets of locations are unrelated: nothing pairs a plaque with a cell except
//! the kernel weights computed later.
//!
//! Input files are headed, comma-separated UTF-8:
//!
//! ```text
//! samples.csv     sample_id,time_value
//! plaques.csv     sample_id,plaque_id,x_um,y_um,size
//! cells.csv       sample_id,cell_id,x_um,y_um,cell_type
//! expression.csv  cell_id,<gene_1>,...,<gene_p>      (wide)
//!                 cell_id,gene,value                  (long)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A location in the section plane, in micrometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plaque {
    pub id: String,
    pub location: Point,
    pub outcome: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub location: Point,
    pub cell_type: usize,
}

/// One tissue section.
///
/// Expression is stored row-major: row `k` is the expression vector of
/// `cells[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub time_index: usize,
    pub plaques: Vec<Plaque>,
    pub cells: Vec<Cell>,
    expression: Vec<f64>,
    n_genes: usize,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        time_index: usize,
        plaques: Vec<Plaque>,
        cells: Vec<Cell>,
        expression: Vec<f64>,
        n_genes: usize,
    ) -> Result<Self> {
        let id = id.into();
        if expression.len() != cells.len() * n_genes {
            return Err(Error::Shape(format!(
                "sample `{id}`: expression has {} values, expected {} cells x {} genes",
                expression.len(),
                cells.len(),
                n_genes
            )));
        }
        Ok(Sample {
            id,
            time_index,
            plaques,
            cells,
            expression,
            n_genes,
        })
    }

    pub fn expression(&self, k: usize) -> &[f64] {
        &self.expression[k * self.n_genes..(k + 1) * self.n_genes]
    }

    pub fn expression_matrix(&self) -> &[f64] {
        &self.expression
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }
}

/// A validated collection of samples sharing one gene list, one set of
/// cell-type labels and one set of time points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub genes: Vec<String>,
    pub cell_types: Vec<String>,
    pub times: Vec<f64>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        genes: Vec<String>,
        cell_types: Vec<String>,
        times: Vec<f64>,
    ) -> Result<Self> {
        let ds = Dataset {
            samples,
            genes,
            cell_types,
            times,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Invalid("dataset has no samples".into()));
        }
        if self.genes.is_empty() || self.cell_types.is_empty() || self.times.is_empty() {
            return Err(Error::Invalid(
                "dataset needs at least one gene, one cell type and one time point".into(),
            ));
        }
        let p = self.genes.len();
        for s in &self.samples {
            if s.n_genes != p {
                return Err(Error::Shape(format!(
                    "sample `{}` has {} genes, dataset has {p}",
                    s.id, s.n_genes
                )));
            }
            if s.plaques.is_empty() || s.cells.is_empty() {
                return Err(Error::Invalid(format!(
                    "sample `{}` needs at least one plaque and one cell",
                    s.id
                )));
            }
            if s.time_index >= self.times.len() {
                return Err(Error::Invalid(format!(
                    "sample `{}` has time index {} outside 0..{}",
                    s.id,
                    s.time_index,
                    self.times.len()
                )));
            }
            for pl in &s.plaques {
                if !(pl.location.x.is_finite() && pl.location.y.is_finite() && pl.outcome.is_finite())
                {
                    return Err(Error::Invalid(format!(
                        "plaque `{}` in sample `{}` has a non-finite value",
                        pl.id, s.id
                    )));
                }
            }
            for c in &s.cells {
                if c.cell_type >= self.cell_types.len() {
                    return Err(Error::Invalid(format!(
                        "cell `{}` has cell-type index {} outside 0..{}",
                        c.id,
                        c.cell_type,
                        self.cell_types.len()
                    )));
                }
                if !(c.location.x.is_finite() && c.location.y.is_finite()) {
                    return Err(Error::Invalid(format!("cell `{}` has a non-finite coordinate", c.id)));
                }
            }
            if s.expression.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "sample `{}` has non-finite expression",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn n_cell_types(&self) -> usize {
        self.cell_types.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Standardizes every gene to mean 0 and unit variance across all cells
    /// of all samples. Genes with zero variance are only centred.
    pub fn zscore_genes(&mut self) {
        let p = self.n_genes();
        let mut sum = vec![0.0; p];
        let mut sq = vec![0.0; p];
        let mut n = 0usize;
        for s in &self.samples {
            for row in s.expression.chunks(p) {
                for (l, v) in row.iter().enumerate() {
                    sum[l] += v;
                    sq[l] += v * v;
                }
                n += 1;
            }
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let sd: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt())
            .collect();
        for s in &mut self.samples {
            for row in s.expression.chunks_mut(p) {
                for l in 0..p {
                    row[l] -= mean[l];
                    if sd[l] > 0.0 {
                        row[l] /= sd[l];
                    }
                }
            }
        }
    }
}

/// Layout of the expression file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpressionFormat {
    /// `cell_id` followed by one column per gene.
    #[default]
    Wide,
    /// `cell_id,gene,value` triplets; absent pairs are zero.
    Long,
}

/// Paths of the four input tables.
#[derive(Debug, Clone)]
pub struct DataPaths {
    pub cells: std::path::PathBuf,
    pub expression: std::path::PathBuf,
    pub plaques: std::path::PathBuf,
    pub samples: std::path::PathBuf,
}

impl DataPaths {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            cells: dir.join("cells.csv"),
            expression: dir.join("expression.csv"),
            plaques: dir.join("plaques.csv"),
            samples: dir.join("samples.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.samples, &self.plaques, &self.cells, &self.expression]
    }
}

struct Table {
    name: String,
    reader: csv::Reader<File>,
    columns: HashMap<String, usize>,
}

impl Table {
    fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let columns = reader
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Table {
            name,
            reader,
            columns,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns.get(name).copied().ok_or_else(|| Error::MissingColumn {
            file: self.name.clone(),
            column: name.to_string(),
        })
    }
}

fn parse_f64(file: &str, row: usize, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        row,
        message: format!("cannot parse {what} `{field}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: file.to_string(),
            row,
            message: format!("{what} is not finite"),
        });
    }
    Ok(v)
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Reads and validates the four input tables.
///
/// Raw time values are recoded to `0..T` in ascending order and cell-type
/// labels to `0..C` in lexicographic order. Samples keep the order of
/// `samples.csv`; plaques and cells keep file order within their sample.
pub fn load_dataset(paths: &DataPaths, format: ExpressionFormat) -> Result<Dataset> {
    // samples
    let mut t = Table::open(&paths.samples)?;
    let (c_id, c_time) = (t.column("sample_id")?, t.column("time_value")?);
    let mut sample_ids: Vec<String> = Vec::new();
    let mut sample_times: Vec<f64> = Vec::new();
    let mut sample_pos: HashMap<String, usize> = HashMap::new();
    for rec in t.reader.records() {
        let rec = rec?;
        let row = line_of(&rec);
        let id = rec.get(c_id).unwrap_or("").trim().to_string();
        let time = parse_f64(&t.name, row, rec.get(c_time).unwrap_or(""), "time_value")?;
        if sample_pos.insert(id.clone(), sample_ids.len()).is_some() {
            return Err(Error::Integrity(format!("duplicate sample_id `{id}`")));
        }
        sample_ids.push(id);
        sample_times.push(time);
    }
    let mut times: Vec<f64> = sample_times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();

    // plaques
    let mut t = Table::open(&paths.plaques)?;
    let cols = [
        t.column("sample_id")?,
        t.column("plaque_id")?,
        t.column("x_um")?,
        t.column("y_um")?,
        t.column("size")?,
    ];
    let mut plaques: Vec<Vec<Plaque>> = vec![Vec::new(); sample_ids.len()];
    for rec in t.reader.records() {
        let rec = rec?;
        let row = line_of(&rec);
        let sid = rec.get(cols[0]).unwrap_or("").trim();
        let si = *sample_pos.get(sid).ok_or_else(|| {
            Error::Integrity(format!("{}, row {row}: unknown sample_id `{sid}`", t.name))
        })?;
        plaques[si].push(Plaque {
            id: rec.get(cols[1]).unwrap_or("").trim().to_string(),
            location: Point::new(
                parse_f64(&t.name, row, rec.get(cols[2]).unwrap_or(""), "x_um")?,
                parse_f64(&t.name, row, rec.get(cols[3]).unwrap_or(""), "y_um")?,
            ),
            outcome: parse_f64(&t.name, row, rec.get(cols[4]).unwrap_or(""), "size")?,
        });
    }

    // cells
    let mut t = Table::open(&paths.cells)?;
    let cols = [
        t.column("sample_id")?,
        t.column("cell_id")?,
        t.column("x_um")?,
        t.column("y_um")?,
        t.column("cell_type")?,
    ];
    struct RawCell {
        sample: usize,
        id: String,
        location: Point,
        label: String,
    }
    let mut raw_cells: Vec<RawCell> = Vec::new();
    let mut cell_pos: HashMap<String, usize> = HashMap::new();
    for rec in t.reader.records() {
        let rec = rec?;
        let row = line_of(&rec);
        let sid = rec.get(cols[0]).unwrap_or("").trim();
        let si = *sample_pos.get(sid).ok_or_else(|| {
            Error::Integrity(format!("{}, row {row}: unknown sample_id `{sid}`", t.name))
        })?;
        let id = rec.get(cols[1]).unwrap_or("").trim().to_string();
        if cell_pos.insert(id.clone(), raw_cells.len()).is_some() {
            return Err(Error::Integrity(format!("duplicate cell_id `{id}`")));
        }
        raw_cells.push(RawCell {
            sample: si,
            id,
            location: Point::new(
                parse_f64(&t.name, row, rec.get(cols[2]).unwrap_or(""), "x_um")?,
                parse_f64(&t.name, row, rec.get(cols[3]).unwrap_or(""), "y_um")?,
            ),
            label: rec.get(cols[4]).unwrap_or("").trim().to_string(),
        });
    }
    let labels: BTreeSet<&str> = raw_cells.iter().map(|c| c.label.as_str()).collect();
    let cell_types: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let type_index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, s)| (*s, i)).collect();

    // expression
    let (genes, matrix) = read_expression(&paths.expression, format, &cell_pos)?;
    let p = genes.len();

    let mut cells: Vec<Vec<Cell>> = vec![Vec::new(); sample_ids.len()];
    let mut expr: Vec<Vec<f64>> = vec![Vec::new(); sample_ids.len()];
    for (ci, rc) in raw_cells.iter().enumerate() {
        let row = matrix[ci]
            .as_ref()
            .ok_or_else(|| Error::Integrity(format!("cell `{}` has no expression row", rc.id)))?;
        cells[rc.sample].push(Cell {
            id: rc.id.clone(),
            location: rc.location,
            cell_type: type_index[rc.label.as_str()],
        });
        expr[rc.sample].extend_from_slice(row);
    }

    let mut samples = Vec::with_capacity(sample_ids.len());
    for (((id, time), (pl, cl)), ex) in sample_ids
        .into_iter()
        .zip(sample_times)
        .zip(plaques.into_iter().zip(cells))
        .zip(expr)
    {
        let time_index = times.iter().position(|v| *v == time).expect("time present");
        samples.push(Sample::new(id, time_index, pl, cl, ex, p)?);
    }
    Dataset::new(samples, genes, cell_types, times)
}

type ExpressionRows = (Vec<String>, Vec<Option<Vec<f64>>>);

fn read_expression(
    path: &Path,
    format: ExpressionFormat,
    cell_pos: &HashMap<String, usize>,
) -> Result<ExpressionRows> {
    let mut t = Table::open(path)?;
    let c_cell = t.column("cell_id")?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; cell_pos.len()];
    let genes: Vec<String>;
    match format {
        ExpressionFormat::Wide => {
            let headers = t.reader.headers()?.clone();
            let gene_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != c_cell).collect();
            genes = gene_cols.iter().map(|&i| headers[i].trim().to_string()).collect();
            for rec in t.reader.records() {
                let rec = rec?;
                let row = line_of(&rec);
                let id = rec.get(c_cell).unwrap_or("").trim();
                let ci = *cell_pos.get(id).ok_or_else(|| {
                    Error::Integrity(format!(
                        "{}, row {row}: cell_id `{id}` not present in cells file",
                        t.name
                    ))
                })?;
                let mut values = Vec::with_capacity(gene_cols.len());
                for &g in &gene_cols {
                    values.push(parse_f64(&t.name, row, rec.get(g).unwrap_or(""), "expression")?);
                }
                if rows[ci].replace(values).is_some() {
                    return Err(Error::Integrity(format!("duplicate expression row for `{id}`")));
                }
            }
        }
        ExpressionFormat::Long => {
            let (c_gene, c_value) = (t.column("gene")?, t.column("value")?);
            let mut gene_list: Vec<String> = Vec::new();
            let mut gene_pos: HashMap<String, usize> = HashMap::new();
            let mut entries: Vec<(usize, usize, f64)> = Vec::new();
            for rec in t.reader.records() {
                let rec = rec?;
                let row = line_of(&rec);
                let id = rec.get(c_cell).unwrap_or("").trim();
                let ci = *cell_pos.get(id).ok_or_else(|| {
                    Error::Integrity(format!(
                        "{}, row {row}: cell_id `{id}` not present in cells file",
                        t.name
                    ))
                })?;
                let gene = rec.get(c_gene).unwrap_or("").trim().to_string();
                let gi = *gene_pos.entry(gene.clone()).or_insert_with(|| {
                    gene_list.push(gene);
                    gene_list.len() - 1
                });
                let v = parse_f64(&t.name, row, rec.get(c_value).unwrap_or(""), "value")?;
                entries.push((ci, gi, v));
            }
            let p = gene_list.len();
            for (ci, gi, v) in entries {
                rows[ci].get_or_insert_with(|| vec![0.0; p])[gi] = v;
            }
            genes = gene_list;
        }
    }
    Ok((genes, rows))
}

/// Writes a dataset in the wide CSV layout. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DataPaths::in_dir(dir);

    let mut w = csv::Writer::from_path(&paths.samples)?;
    w.write_record(["sample_id", "time_value"])?;
    for s in &dataset.samples {
        w.write_record([s.id.clone(), dataset.times[s.time_index].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&paths.samples, e))?;

    let mut w = csv::Writer::from_path(&paths.plaques)?;
    w.write_record(["sample_id", "plaque_id", "x_um", "y_um", "size"])?;
    for s in &dataset.samples {
        for pl in &s.plaques {
            w.write_record([
                s.id.clone(),
                pl.id.clone(),
                pl.location.x.to_string(),
                pl.location.y.to_string(),
                pl.outcome.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.plaques, e))?;

    let mut w = csv::Writer::from_path(&paths.cells)?;
    w.write_record(["sample_id", "cell_id", "x_um", "y_um", "cell_type"])?;
    for s in &dataset.samples {
        for c in &s.cells {
            w.write_record([
                s.id.clone(),
                c.id.clone(),
                c.location.x.to_string(),
                c.location.y.to_string(),
                dataset.cell_types[c.cell_type].clone(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.cells, e))?;

    let file = File::create(&paths.expression).map_err(|e| Error::io(&paths.expression, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(&paths.expression, e);
    write!(out, "cell_id").map_err(io)?;
    for g in &dataset.genes {
        write!(out, ",{g}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for s in &dataset.samples {
        for (k, c) in s.cells.iter().enumerate() {
            write!(out, "{}", c.id).map_err(io)?;
            for v in s.expression(k) {
                write!(out, ",{v}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;
    Ok(())
}

/// Why a gene is in a [`GenePanel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelReason {
    DetectionFilter,
    ForcedInclude,
}

/// An ordered subset of gene indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GenePanel {
    pub kept_indices: Vec<usize>,
    pub provenance: Vec<PanelReason>,
}

impl GenePanel {
    pub fn all(p: usize) -> Self {
        GenePanel {
            kept_indices: (0..p).collect(),
            provenance: vec![PanelReason::DetectionFilter; p],
        }
    }

    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

/// How per-stratum detection rates combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stratification {
    /// The rate must exceed the threshold in every non-empty stratum.
    #[default]
    All,
    /// Exceeding it in one non-empty stratum is enough.
    Any,
}

/// Settings for [`filter_genes`].
#[derive(Debug, Clone)]
pub struct GeneFilter {
    pub min_detect_frac: f64,
    pub near_radius_um: f64,
    pub forced_includes: Vec<String>,
    pub stratification: Stratification,
}

/// Keeps genes detected (nonzero) in more than `min_detect_frac` of the
/// near-plaque cells of each (cell type, sample) stratum, plus any forced
/// genes. A cell is near-plaque when its distance to the closest plaque of
/// its sample is at most `near_radius_um`. Empty strata are ignored; a gene
/// with no non-empty stratum is not kept by the filter.
pub fn filter_genes(dataset: &Dataset, filter: &GeneFilter) -> Result<GenePanel> {
    if !(0.0..=1.0).contains(&filter.min_detect_frac) {
        return Err(Error::Invalid(format!(
            "min_detect_frac must lie in [0, 1], got {}",
            filter.min_detect_frac
        )));
    }
    if filter.near_radius_um <= 0.0 || filter.near_radius_um.is_nan() {
        return Err(Error::Invalid(format!(
            "near_radius_um must be positive, got {}",
            filter.near_radius_um
        )));
    }
    let p = dataset.n_genes();
    let mut forced = BTreeSet::new();
    for name in &filter.forced_includes {
        let idx = dataset
            .genes
            .iter()
            .position(|g| g == name)
            .ok_or_else(|| Error::UnknownGene(name.clone()))?;
        forced.insert(idx);
    }

    // (cell type, sample) -> (cell count, per-gene detections)
    let mut strata: BTreeMap<(usize, usize), (usize, Vec<usize>)> = BTreeMap::new();
    for (si, s) in dataset.samples.iter().enumerate() {
        for (k, c) in s.cells.iter().enumerate() {
            let nearest = s
                .plaques
                .iter()
                .map(|pl| pl.location.distance(&c.location))
                .fold(f64::INFINITY, f64::min);
            if nearest > filter.near_radius_um {
                continue;
            }
            let entry = strata
                .entry((c.cell_type, si))
                .or_insert_with(|| (0, vec![0; p]));
            entry.0 += 1;
            for (l, v) in s.expression(k).iter().enumerate() {
                if *v != 0.0 {
                    entry.1[l] += 1;
                }
            }
        }
    }

    let mut panel = GenePanel {
        kept_indices: Vec::new(),
        provenance: Vec::new(),
    };
    for l in 0..p {
        let mut rates = strata
            .values()
            .map(|(n, det)| det[l] as f64 / *n as f64)
            .peekable();
        let detected = rates.peek().is_some()
            && match filter.stratification {
                Stratification::All => rates.all(|r| r > filter.min_detect_frac),
                Stratification::Any => rates.any(|r| r > filter.min_detect_frac),
            };
        if detected {
            panel.kept_indices.push(l);
            panel.provenance.push(PanelReason::DetectionFilter);
        } else if forced.contains(&l) {
            panel.kept_indices.push(l);
            panel.provenance.push(PanelReason::ForcedInclude);
        }
    }
    Ok(panel)
}

/// Restricts every expression vector to the panel's genes, in panel order.
pub fn subset_to_panel(dataset: &Dataset, panel: &GenePanel) -> Result<Dataset> {
    let p = dataset.n_genes();
    let mut seen = BTreeSet::new();
    for &l in &panel.kept_indices {
        if l >= p || !seen.insert(l) {
            return Err(Error::Invalid(format!(
                "panel index {l} is out of range or repeated"
            )));
        }
    }
    let q = panel.len();
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let mut expr = Vec::with_capacity(s.cells.len() * q);
            for k in 0..s.cells.len() {
                let row = s.expression(k);
                expr.extend(panel.kept_indices.iter().map(|&l| row[l]));
            }
            Sample::new(
                s.id.clone(),
                s.time_index,
                s.plaques.clone(),
                s.cells.clone(),
                expr,
                q,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        samples,
        panel.kept_indices.iter().map(|&l| dataset.genes[l].clone()).collect(),
        dataset.cell_types.clone(),
        dataset.times.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        // one plaque at the origin; five cells, two of them far away
        let cells = vec![
            Cell { id: "c0".into(), location: Point::new(1.0, 0.0), cell_type: 0 },
            Cell { id: "c1".into(), location: Point::new(0.0, 2.0), cell_type: 0 },
            Cell { id: "c2".into(), location: Point::new(3.0, 0.0), cell_type: 0 },
            Cell { id: "c3".into(), location: Point::new(500.0, 0.0), cell_type: 0 },
            Cell { id: "c4".into(), location: Point::new(0.0, 600.0), cell_type: 0 },
        ];
        #[rustfmt::skip]
        let expr = vec![
            1.0, 0.0, 0.0,
            2.0, 0.0, 0.0,
            0.0, 5.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 1.0, 0.0,
        ];
        let plaques = vec![Plaque { id: "p0".into(), location: Point::new(0.0, 0.0), outcome: 1.0 }];
        let s = Sample::new("s0", 0, plaques, cells, expr, 3).unwrap();
        Dataset::new(
            vec![s],
            vec!["g0".into(), "g1".into(), "g2".into()],
            vec!["A".into()],
            vec![8.0],
        )
        .unwrap()
    }

    fn filt(frac: f64) -> GeneFilter {
        GeneFilter {
            min_detect_frac: frac,
            near_radius_um: 150.0,
            forced_includes: vec![],
            stratification: Stratification::All,
        }
    }

    #[test]
    fn zero_gene_excluded_unless_forced() {
        let ds = toy();
        // near cells c0..c2: g0 detected 2/3, g1 1/3, g2 0/3
        let panel = filter_genes(&ds, &filt(0.2)).unwrap();
        assert_eq!(panel.kept_indices, vec![0, 1]);
        let panel = filter_genes(&ds, &filt(0.5)).unwrap();
        assert_eq!(panel.kept_indices, vec![0]);

        let mut f = filt(0.2);
        f.forced_includes = vec!["g2".into()];
        let panel = filter_genes(&ds, &f).unwrap();
        assert_eq!(panel.kept_indices, vec![0, 1, 2]);
        assert_eq!(panel.provenance[2], PanelReason::ForcedInclude);
    }

    #[test]
    fn vacuous_threshold_keeps_genes_seen_near_plaques() {
        let panel = filter_genes(&toy(), &filt(0.0)).unwrap();
        assert_eq!(panel.kept_indices, vec![0, 1]);
    }

    #[test]
    fn unknown_forced_gene_is_an_error() {
        let mut f = filt(0.2);
        f.forced_includes = vec!["nope".into()];
        assert!(matches!(filter_genes(&toy(), &f), Err(Error::UnknownGene(_))));
    }

    #[test]
    fn subset_projects_and_full_panel_is_identity() {
        let ds = toy();
        assert_eq!(subset_to_panel(&ds, &GenePanel::all(3)).unwrap(), ds);
        let one = subset_to_panel(
            &ds,
            &GenePanel { kept_indices: vec![0], provenance: vec![PanelReason::DetectionFilter] },
        )
        .unwrap();
        assert_eq!(one.n_genes(), 1);
        assert!(one.samples[0].cells.iter().enumerate().all(|(k, _)| one.samples[0].expression(k).len() == 1));
        assert_eq!(one.samples[0].expression(1), &[2.0]);
    }

    #[test]
    fn any_stratum_is_looser_than_all() {
        let mut ds = toy();
        // second stratum: type B near the plaque, expressing only g2
        ds.cell_types.push("B".into());
        let s = &mut ds.samples[0];
        s.cells[2].cell_type = 1;
        let mut all = filt(0.4);
        let strict = filter_genes(&ds, &all).unwrap();
        all.stratification = Stratification::Any;
        let loose = filter_genes(&ds, &all).unwrap();
        assert!(strict.len() <= loose.len());
        assert_eq!(loose.kept_indices, vec![0, 1]);
        assert!(strict.kept_indices.is_empty());
    }

    #[test]
    fn zscore_centres_and_scales() {
        let mut ds = toy();
        ds.zscore_genes();
        let col0: Vec<f64> = (0..5).map(|k| ds.samples[0].expression(k)[0]).collect();
        let mean: f64 = col0.iter().sum::<f64>() / 5.0;
        let var: f64 = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // constant gene stays at zero
        assert!((0..5).all(|k| ds.samples[0].expression(k)[2] == 0.0));
    }
}
