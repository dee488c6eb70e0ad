//! JSONL dataset files: one [`SceneTriplet`] per line, floats written with
//! 17 significant digits so every value reads back bit-exact.

use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::Serialize;

use super::types::SceneTriplet;
use crate::error::{Error, Result};

/// JSON formatter that prints every `f64` as `d.dddddddddddddddde±x`.
#[derive(Debug, Default, Clone, Copy)]
pub struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes one value on a single line with the 17-digit float format.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser).map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_scenes<W: Write>(scenes: &[SceneTriplet], mut w: W) -> Result<()> {
    for s in scenes {
        let line = to_json_line(s)?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

/// Reads scenes, reporting the 1-based line of the first malformed record.
pub fn read_scenes<R: BufRead>(r: R) -> Result<Vec<SceneTriplet>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let scene: SceneTriplet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        scene.check().map_err(|msg| Error::Parse { line: line_no, msg })?;
        out.push(scene);
    }
    Ok(out)
}

pub fn write_dataset(scenes: &[SceneTriplet], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = io::BufWriter::new(f);
    write_scenes(scenes, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneTriplet>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scenes(io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_world, WorldConfig};

    fn world() -> Vec<SceneTriplet> {
        let cfg = WorldConfig {
            num_scenes: 6,
            seed: 1,
            area_extent: 500.0,
            ..WorldConfig::default()
        };
        generate_world(&cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let scenes = world();
        let mut buf = Vec::new();
        write_scenes(&scenes, &mut buf).unwrap();
        assert_eq!(read_scenes(&buf[..]).unwrap(), scenes);
    }

    #[test]
    fn float_format() {
        let line = to_json_line(&vec![0.1f64, -2.5, 0.0]).unwrap();
        assert_eq!(
            line,
            "[1.0000000000000001e-1,-2.5000000000000000e0,0.0000000000000000e0]"
        );
        let back: Vec<f64> = serde_json::from_str(&line).unwrap();
        assert_eq!(back, vec![0.1, -2.5, 0.0]);
    }

    #[test]
    fn truncated_file_names_line() {
        let scenes = world();
        let mut buf = Vec::new();
        write_scenes(&scenes, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 40];
        match read_scenes(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, scenes.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dataset() {
        let mut buf = Vec::new();
        write_scenes(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
        assert!(read_scenes(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn unknown_field_rejected() {
        let scenes = world();
        let mut line = to_json_line(&scenes[0]).unwrap();
        line.insert_str(1, "\"extra\":1,");
        assert!(matches!(
            read_scenes(line.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
