use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellTrajectory, GpsPoint, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajFormat {
    /// Header `id,seq,lon,lat`, one row per point, rows of one id contiguous
    /// and seq-ascending. Extra columns are ignored.
    Csv,
    /// One `{"id": ..., "points": [[lon, lat], ...]}` object per line.
    Jsonl,
}

impl TrajFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(TrajFormat::Csv),
            Some("jsonl") | Some("json") => Ok(TrajFormat::Jsonl),
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer trajectory format from {}",
                path.display()
            ))),
        }
    }
}

pub fn load_trajectories(path: &Path, format: TrajFormat) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        TrajFormat::Csv => read_csv(BufReader::new(file)),
        TrajFormat::Jsonl => read_jsonl(BufReader::new(file), path),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (id_c, seq_c, lon_c, lat_c) = (col("id")?, col("seq")?, col("lon")?, col("lat")?);

    let mut out: Vec<Trajectory> = Vec::new();
    let mut last_seq: Option<i64> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize| record.get(c).ok_or_else(|| parse_err(line, "short row"));
        let num = |c: usize, what: &str| -> Result<f64> {
            field(c)?
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad {what} `{}`", record.get(c).unwrap_or(""))))
        };
        let id = field(id_c)?;
        let seq: i64 = field(seq_c)?
            .parse()
            .map_err(|_| parse_err(line, "bad seq"))?;
        let point =
            GpsPoint::new(num(lon_c, "lon")?, num(lat_c, "lat")?).map_err(|e| parse_err(line, e.to_string()))?;

        match out.last_mut() {
            Some(t) if t.id == id => {
                if last_seq.is_some_and(|s| seq <= s) {
                    return Err(parse_err(line, format!("seq {seq} not ascending for id `{id}`")));
                }
                t.points.push(point);
            }
            _ => {
                if out.iter().any(|t| t.id == id) {
                    return Err(parse_err(line, format!("rows for id `{id}` are not contiguous")));
                }
                out.push(Trajectory {
                    id: id.to_string(),
                    points: vec![point],
                });
            }
        }
        last_seq = Some(seq);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonRecord {
    id: serde_json::Value,
    points: Vec<[f64; 2]>,
}

fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let id = match rec.id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        let points = rec
            .points
            .iter()
            .map(|&[lon, lat]| GpsPoint::new(lon, lat))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        let t = Trajectory::new(id, points).map_err(|e| parse_err(line_no, e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Serialize)]
struct JsonOut<'a> {
    id: &'a str,
    points: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<usize>>,
}

pub fn write_trajectories(path: &Path, data: &[Trajectory], format: TrajFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        TrajFormat::Csv => {
            writeln!(w, "id,seq,lon,lat").map_err(io)?;
            for t in data {
                for (i, p) in t.points.iter().enumerate() {
                    writeln!(w, "{},{},{:?},{:?}", t.id, i, p.lon, p.lat).map_err(io)?;
                }
            }
        }
        TrajFormat::Jsonl => {
            for t in data {
                write_json_line(&mut w, t, None).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// JSONL trajectories with an extra `cells` array holding the row-major
/// cell index of each point. Readable by [`load_trajectories`].
pub fn write_cell_dataset(path: &Path, data: &[Trajectory], cells: &[CellTrajectory]) -> Result<()> {
    if data.len() != cells.len() {
        return Err(Error::InvalidArgument("trajectory/cell count mismatch".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (t, c) in data.iter().zip(cells) {
        write_json_line(&mut w, t, Some(c.cells.iter().map(|c| c.0).collect())).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_json_line<W: Write>(w: &mut W, t: &Trajectory, cells: Option<Vec<usize>>) -> std::io::Result<()> {
    let rec = JsonOut {
        id: &t.id,
        points: t.points.iter().map(|p| [p.lon, p.lat]).collect(),
        cells,
    };
    serde_json::to_writer(&mut *w, &rec)?;
    writeln!(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(content: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_single_record() {
        let f = tmp("id,seq,lon,lat\na,0,1.0,2.0\na,1,1.5,2.5\na,2,2.0,3.0\n", ".csv");
        let ts = load_trajectories(f.path(), TrajFormat::Csv).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts[0].len(), 3);
        assert_eq!(ts[0].points[2], GpsPoint { lon: 2.0, lat: 3.0 });
    }

    #[test]
    fn empty_files_give_empty_lists() {
        let f = tmp("", ".jsonl");
        assert!(load_trajectories(f.path(), TrajFormat::Jsonl).unwrap().is_empty());
        let f = tmp("id,seq,lon,lat\n", ".csv");
        assert!(load_trajectories(f.path(), TrajFormat::Csv).unwrap().is_empty());
    }

    #[test]
    fn latitude_violation_names_line() {
        let f = tmp("id,seq,lon,lat\na,0,1.0,2.0\na,1,1.0,95.0\n", ".csv");
        match load_trajectories(f.path(), TrajFormat::Csv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = tmp("{\"id\":1,\"points\":[[0,0]]}\n{\"id\":2,\"points\":[[0,95]]}\n", ".jsonl");
        match load_trajectories(f.path(), TrajFormat::Jsonl) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_interleaved_ids_and_bad_order() {
        let f = tmp("id,seq,lon,lat\na,0,0,0\nb,0,0,0\na,1,0,0\n", ".csv");
        assert!(matches!(
            load_trajectories(f.path(), TrajFormat::Csv),
            Err(Error::Parse { line: 4, .. })
        ));
        let f = tmp("id,seq,lon,lat\na,1,0,0\na,0,0,0\n", ".csv");
        assert!(load_trajectories(f.path(), TrajFormat::Csv).is_err());
    }

    #[test]
    fn write_then_load_both_formats() {
        let data = vec![
            Trajectory::from_xy("p", &[(0.1, 0.2), (0.3, 0.4)]).unwrap(),
            Trajectory::from_xy("q", &[(-8.6, 41.15)]).unwrap(),
        ];
        for (fmt, ext) in [(TrajFormat::Csv, ".csv"), (TrajFormat::Jsonl, ".jsonl")] {
            let f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
            write_trajectories(f.path(), &data, fmt).unwrap();
            assert_eq!(load_trajectories(f.path(), fmt).unwrap(), data);
        }
    }

    #[test]
    fn cell_dataset_is_loadable_jsonl() {
        let data = vec![Trajectory::from_xy("p", &[(0.1, 0.2), (0.3, 0.4)]).unwrap()];
        let cells = vec![CellTrajectory {
            source_id: "p".into(),
            cells: vec![super::super::CellId(0), super::super::CellId(3)],
        }];
        let f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        write_cell_dataset(f.path(), &data, &cells).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.contains("\"cells\":[0,3]"));
        assert_eq!(load_trajectories(f.path(), TrajFormat::Jsonl).unwrap(), data);
    }
}
