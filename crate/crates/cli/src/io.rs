//! File formats: CSV datasets, JSON documents, TSV curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use metric_regions::metric::QuantileGrid;
use metric_regions::{LabeledDataset, Responses};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

enum ResponseColumns {
    Euclidean(usize),
    Quantile(Arc<QuantileGrid>),
}

struct Schema {
    predictor_dim: usize,
    responses: ResponseColumns,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

/// Column layout: `x_1..x_d`, then `y_1..y_m` or `q_<level>` columns.
fn parse_header(path: &Path, header: &csv::StringRecord) -> CliResult<Schema> {
    let names: Vec<&str> = header.iter().collect();
    let d = names.iter().take_while(|n| n.starts_with("x_")).count();
    for (i, n) in names[..d].iter().enumerate() {
        if *n != format!("x_{}", i + 1) {
            return Err(data_err(path, format!("column {} is '{n}', expected 'x_{}'", i + 1, i + 1)));
        }
    }
    if d == 0 {
        return Err(data_err(path, "header has no predictor columns x_1.."));
    }
    let rest = &names[d..];
    if rest.is_empty() {
        return Err(data_err(path, "header has no response columns"));
    }
    let responses = if rest[0].starts_with("q_") {
        let levels = rest
            .iter()
            .map(|n| {
                n.strip_prefix("q_")
                    .and_then(|l| l.parse::<f64>().ok())
                    .ok_or_else(|| data_err(path, format!("response column '{n}' is not q_<level>")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        let standard = QuantileGrid::standard();
        let grid = if standard.levels() == levels.as_slice() {
            standard
        } else {
            Arc::new(QuantileGrid::new(levels).map_err(|e| data_err(path, e))?)
        };
        ResponseColumns::Quantile(grid)
    } else {
        for (j, n) in rest.iter().enumerate() {
            if *n != format!("y_{}", j + 1) {
                return Err(data_err(path, format!("column '{n}' should be 'y_{}'", j + 1)));
            }
        }
        ResponseColumns::Euclidean(rest.len())
    };
    Ok(Schema {
        predictor_dim: d,
        responses,
    })
}

fn reader(path: &Path) -> CliResult<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e))
}

fn parse_cell(path: &Path, row: usize, column: &str, raw: &str) -> CliResult<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| data_err(path, format!("row {row}, column {column}: '{raw}' is not a finite number")))
}

fn records<'a>(
    path: &Path,
    rdr: &'a mut csv::Reader<File>,
) -> impl Iterator<Item = CliResult<(usize, csv::StringRecord)>> + 'a {
    let path = path.to_path_buf();
    rdr.records().enumerate().map(move |(i, r)| {
        let row = i + 1;
        r.map(|rec| (row, rec)).map_err(|e| data_err(&path, format!("row {row}: {e}")))
    })
}

/// Reads a labelled dataset, reporting the row and column of any bad cell.
pub fn read_dataset(path: &Path) -> CliResult<LabeledDataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    let schema = parse_header(path, &header)?;
    let d = schema.predictor_dim;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in records(path, &mut rdr) {
        let (row, rec) = rec?;
        for (j, raw) in rec.iter().enumerate() {
            let v = parse_cell(path, row, &header[j], raw)?;
            if j < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        if let ResponseColumns::Quantile(grid) = &schema.responses {
            let g = grid.len();
            let point = &ys[ys.len() - g..];
            let violations = metric_regions::metric::validate_quantile(grid.levels(), point);
            if let Some(v) = violations.first() {
                return Err(data_err(path, format!("row {row}: {v}")));
            }
        }
    }
    if xs.is_empty() {
        return Err(data_err(path, "no data rows"));
    }
    let responses = match schema.responses {
        ResponseColumns::Euclidean(dim) => Responses::Euclidean { dim, values: ys },
        ResponseColumns::Quantile(grid) => Responses::Quantile { grid, values: ys },
    };
    LabeledDataset::new(d, xs, responses).map_err(|e| data_err(path, e))
}

/// Reads the `x_1..x_d` columns of a CSV file; other columns are ignored.
pub fn read_predictors(path: &Path, d: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    let cols = (1..=d)
        .map(|j| {
            let name = format!("x_{j}");
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| data_err(path, format!("missing predictor column {name}")))
        })
        .collect::<CliResult<Vec<usize>>>()?;
    let mut out = Vec::new();
    for rec in records(path, &mut rdr) {
        let (row, rec) = rec?;
        out.push(
            cols.iter()
                .map(|&c| parse_cell(path, row, &header[c], rec.get(c).unwrap_or("")))
                .collect::<CliResult<Vec<f64>>>()?,
        );
    }
    Ok(out)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("writing {}: {e}", path.display()))
}

pub fn write_dataset(path: &Path, data: &LabeledDataset) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let d = data.predictor_dim();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
    match data.responses() {
        Responses::Euclidean { dim, .. } => header.extend((1..=*dim).map(|j| format!("y_{j}"))),
        Responses::Quantile { grid, .. } => header.extend(grid.levels().iter().map(|l| format!("q_{l}"))),
    }
    let csv_err = |e: csv::Error| CliError::Data(format!("writing {}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let row = data.x(i).iter().chain(data.y(i).values()).map(|v| v.to_string());
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

/// Long-format TSV: `curve`, `x`, `coverage`.
pub fn write_curves<'a>(
    path: &Path,
    curves: impl IntoIterator<Item = (String, &'a metric_regions::CoverageCurve)>,
) -> CliResult<()> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(w, "curve\tx\tcoverage").map_err(&err)?;
    for (label, c) in curves {
        for (x, p) in c.x.iter().zip(&c.p) {
            writeln!(w, "{label}\t{x}\t{p}").map_err(&err)?;
        }
    }
    w.flush().map_err(err)
}
