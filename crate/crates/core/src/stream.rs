//! Line-oriented measurement stream files.
//!
//! One whitespace-separated record per line:
//!
//! ```text
//! pseudorange3 <time> <sat_id> <sat_x> <sat_y> <sat_z> <range> <std>
//! odometry <time> <dt> <fwd> <lat> <vert> <dyaw> <info_11> <info_22> <info_33> <info_44>
//! gt <time> <x> <y> <z> <phi>
//! ```
//!
//! Odometry information is diagonal in this format. Blank lines and lines
//! starting with `#` are ignored. Measurement records must be non-decreasing
//! in time, and so must ground-truth records. Floats are written in shortest
//! round-trip form, so write -> read -> write reproduces the file exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use crate::error::{invalid, Error, Result};
use crate::model::{Measurement, OdometryMeasurement, PoseState, PseudorangeMeasurement, Timestamp};
use crate::sim::GroundTruth;

/// Ground-truth pose at one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub time: Timestamp,
    pub pose: PoseState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stream {
    pub measurements: Vec<Measurement>,
    pub truth: Vec<TruthRecord>,
}

impl Stream {
    pub fn from_ground_truth(measurements: Vec<Measurement>, truth: &GroundTruth) -> Self {
        let truth = truth.epochs.iter().map(|e| TruthRecord { time: e.time, pose: e.pose }).collect();
        Stream { measurements, truth }
    }
}

pub fn format_measurement(m: &Measurement) -> Result<String> {
    Ok(match m {
        Measurement::Pseudorange(p) => format!(
            "pseudorange3 {} {} {} {} {} {} {}",
            p.time.0, p.sat_id, p.sat_pos.x, p.sat_pos.y, p.sat_pos.z, p.range, p.nominal_std
        ),
        Measurement::Odometry(o) => {
            let i = &o.info;
            let off_diagonal = (0..4).any(|r| (0..4).any(|c| r != c && i[(r, c)] != 0.0));
            if off_diagonal {
                return invalid(format!("odometry at t = {} has a non-diagonal information matrix", o.time));
            }
            format!(
                "odometry {} {} {} {} {} {} {} {} {} {}",
                o.time.0,
                o.dt,
                o.forward,
                o.lateral,
                o.vertical,
                o.dyaw,
                i[(0, 0)],
                i[(1, 1)],
                i[(2, 2)],
                i[(3, 3)]
            )
        }
    })
}

/// Write measurements followed by ground truth; each group keeps its order.
pub fn write_stream<W: Write>(mut out: W, stream: &Stream) -> Result<()> {
    let mut buf = String::new();
    for m in &stream.measurements {
        buf.push_str(&format_measurement(m)?);
        buf.push('\n');
    }
    for t in &stream.truth {
        writeln!(buf, "gt {} {} {} {} {}", t.time.0, t.pose.x, t.pose.y, t.pose.z, t.pose.phi).unwrap();
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn stream_to_string(stream: &Stream) -> Result<String> {
    let mut v = Vec::new();
    write_stream(&mut v, stream)?;
    Ok(String::from_utf8(v).expect("stream text is ASCII"))
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn nums(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|e| parse_err(line, format!("bad number `{f}`: {e}"))))
        .collect()
}

/// Parse one non-empty, non-comment line.
pub fn parse_line(line_no: usize, line: &str) -> Result<Record> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let expect = |n: usize| -> Result<()> {
        if fields.len() != n {
            return Err(parse_err(line_no, format!("`{}` needs {} fields, found {}", fields[0], n - 1, fields.len() - 1)));
        }
        Ok(())
    };
    let wrap_err = |e: Error| parse_err(line_no, e.to_string());
    match fields[0] {
        "pseudorange3" => {
            expect(8)?;
            let sat_id = fields[2]
                .parse::<u32>()
                .map_err(|e| parse_err(line_no, format!("bad satellite id `{}`: {e}", fields[2])))?;
            let mut v = nums(line_no, &fields[1..2])?;
            v.extend(nums(line_no, &fields[3..])?);
            let time = Timestamp::new(v[0]).map_err(wrap_err)?;
            let m = PseudorangeMeasurement::new(time, sat_id, Vector3::new(v[1], v[2], v[3]), v[4], v[5])
                .map_err(wrap_err)?;
            Ok(Record::Measurement(Measurement::Pseudorange(m)))
        }
        "odometry" => {
            expect(11)?;
            let v = nums(line_no, &fields[1..])?;
            let time = Timestamp::new(v[0]).map_err(wrap_err)?;
            let m = OdometryMeasurement::with_diagonal_info(time, v[1], v[2], v[3], v[4], v[5], [v[6], v[7], v[8], v[9]])
                .map_err(wrap_err)?;
            Ok(Record::Measurement(Measurement::Odometry(m)))
        }
        "gt" => {
            expect(6)?;
            let v = nums(line_no, &fields[1..])?;
            let time = Timestamp::new(v[0]).map_err(wrap_err)?;
            if !v[1..].iter().all(|x| x.is_finite()) {
                return Err(parse_err(line_no, "ground truth must be finite"));
            }
            // stored verbatim so the writer reproduces the input
            Ok(Record::Truth(TruthRecord { time, pose: PoseState { x: v[1], y: v[2], z: v[3], phi: v[4] } }))
        }
        other => Err(parse_err(line_no, format!("unknown record type `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Measurement(Measurement),
    Truth(TruthRecord),
}

pub fn read_stream<R: BufRead>(input: R) -> Result<Stream> {
    let mut stream = Stream::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_line(line_no, trimmed)? {
            Record::Measurement(m) => {
                if let Some(prev) = stream.measurements.last() {
                    if m.time() < prev.time() {
                        return Err(Error::OutOfOrder { line: line_no, record: trimmed.to_string() });
                    }
                }
                stream.measurements.push(m);
            }
            Record::Truth(t) => {
                if let Some(prev) = stream.truth.last() {
                    if t.time < prev.time {
                        return Err(Error::OutOfOrder { line: line_no, record: trimmed.to_string() });
                    }
                }
                stream.truth.push(t);
            }
        }
    }
    Ok(stream)
}

pub fn parse_stream(text: &str) -> Result<Stream> {
    read_stream(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, NlosInterval, OffsetComponent, ScenarioSpec, Segment};

    fn spec() -> ScenarioSpec {
        let mut s: ScenarioSpec = ScenarioSpec::from_toml("duration = 30.0\nseed = 5\n").unwrap();
        s.trajectory.push(Segment { duration: 10.0, speed: 7.0, yaw_rate: 0.05 });
        s.nlos.push(NlosInterval {
            start: 5.0,
            end: 20.0,
            fraction: 0.25,
            offsets: vec![OffsetComponent { weight: 1.0, mean: 30.0, std: 10.0 }],
        });
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let (meas, truth) = generate(&spec()).unwrap();
        let stream = Stream::from_ground_truth(meas, &truth);
        let text = stream_to_string(&stream).unwrap();
        let back = parse_stream(&text).unwrap();
        assert_eq!(back, stream);
        assert_eq!(stream_to_string(&back).unwrap(), text);
    }

    #[test]
    fn rejects_out_of_order_with_line() {
        let text = "pseudorange3 2 1 2e7 0 0 2e7 3\n\npseudorange3 1 1 2e7 0 0 2e7 3\n";
        match parse_stream(text) {
            Err(Error::OutOfOrder { line, record }) => {
                assert_eq!(line, 3);
                assert!(record.starts_with("pseudorange3 1"));
            }
            other => panic!("expected out-of-order error, got {other:?}"),
        }
    }

    #[test]
    fn reports_malformed_lines() {
        assert!(matches!(parse_stream("odometry 1 2 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_stream("# c\nfoo 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_stream("pseudorange3 0 1 0 0 0 -5 3\n"), Err(Error::Parse { line: 1, .. })));
        assert_eq!(parse_stream("").unwrap(), Stream::default());
    }
}
