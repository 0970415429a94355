//! CGRID: the bit-exact binary format for time-stacked gridded fields.
//!
//! Little-endian layout:
//!
//! ```text
//! magic            4 bytes, "CGR1"
//! n_lat            u32
//! n_lon            u32
//! n_time           u32
//! lats             f64 * n_lat
//! lons             f64 * n_lon
//! time codes       i32 * n_time, year*100 + month
//! payload          f64 * n_time * n_lat * n_lon, row-major (lat-major,
//!                  lon-minor), time outermost
//! ```
//!
//! Units and variable tags are not stored here; they travel in the ensemble
//! manifest. [`read_grid_stack`] therefore returns a series with empty tags.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{FieldSeries, GridError, GridSpec, TimeCode};

const MAGIC: [u8; 4] = *b"CGR1";

fn io_err(path: &Path, source: std::io::Error) -> GridError {
    GridError::Io { path: path.display().to_string(), source }
}

fn format_err(field: &str, detail: impl Into<String>) -> GridError {
    GridError::Format { field: field.into(), detail: detail.into() }
}

/// Decode a CGRID file. Decoding then re-encoding is byte-identical.
pub fn read_grid_stack(path: impl AsRef<Path>) -> Result<FieldSeries, GridError> {
    read_grid_stack_tagged(path, "", "")
}

/// Decode a CGRID file, attaching units/variable tags from the manifest.
pub fn read_grid_stack_tagged(
    path: impl AsRef<Path>,
    units: &str,
    variable: &str,
) -> Result<FieldSeries, GridError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("magic", "file too short for magic bytes"))?;
    if magic != MAGIC {
        return Err(format_err(
            "magic",
            format!("expected \"CGR1\", got {:?}", String::from_utf8_lossy(&magic)),
        ));
    }
    let n_lat = r.read_u32::<LittleEndian>().map_err(|_| format_err("n_lat", "truncated"))?;
    let n_lon = r.read_u32::<LittleEndian>().map_err(|_| format_err("n_lon", "truncated"))?;
    let n_time = r.read_u32::<LittleEndian>().map_err(|_| format_err("n_time", "truncated"))?;
    if n_lat == 0 || n_lon == 0 {
        return Err(format_err(
            if n_lat == 0 { "n_lat" } else { "n_lon" },
            "dimension must be positive",
        ));
    }

    let mut lats = vec![0.0; n_lat as usize];
    r.read_f64_into::<LittleEndian>(&mut lats)
        .map_err(|_| format_err("lats", "truncated latitude axis"))?;
    let mut lons = vec![0.0; n_lon as usize];
    r.read_f64_into::<LittleEndian>(&mut lons)
        .map_err(|_| format_err("lons", "truncated longitude axis"))?;
    let spec = GridSpec::new(lats, lons)
        .map_err(|e| format_err("lats/lons", e.to_string()))?;

    let mut codes = vec![0i32; n_time as usize];
    r.read_i32_into::<LittleEndian>(&mut codes)
        .map_err(|_| format_err("times", "truncated time axis"))?;
    let mut times = Vec::with_capacity(codes.len());
    for (i, &c) in codes.iter().enumerate() {
        let t = TimeCode::from_code(c)
            .map_err(|e| format_err(&format!("times[{i}]"), e.to_string()))?;
        times.push(t);
    }

    let d = spec.len();
    let mut frames = Vec::with_capacity(n_time as usize);
    for t in 0..n_time as usize {
        let mut frame = vec![0.0; d];
        r.read_f64_into::<LittleEndian>(&mut frame)
            .map_err(|_| format_err("payload", format!("truncated payload at frame {t}")))?;
        frames.push(frame);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(format_err("payload", "trailing bytes after payload"));
    }

    // Frame validation (finiteness, lengths) and the time axis ordering run
    // through the FieldSeries constructor.
    FieldSeries::new(spec, times, frames, units, variable)
}

/// Encode a series to the CGRID layout. Two writes of the same series are
/// byte-identical.
pub fn write_grid_stack(series: &FieldSeries, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(series.spec.n_lat() as u32)
        .map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(series.spec.n_lon() as u32)
        .map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(series.times.len() as u32)
        .map_err(|e| io_err(path, e))?;
    for &lat in series.spec.lats() {
        w.write_f64::<LittleEndian>(lat).map_err(|e| io_err(path, e))?;
    }
    for &lon in series.spec.lons() {
        w.write_f64::<LittleEndian>(lon).map_err(|e| io_err(path, e))?;
    }
    for &t in &series.times {
        w.write_i32::<LittleEndian>(t.code()).map_err(|e| io_err(path, e))?;
    }
    for frame in &series.frames {
        for &v in frame {
            w.write_f64::<LittleEndian>(v).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_series() -> FieldSeries {
        let spec = GridSpec::new(vec![-45.0, 45.0], vec![0.0, 180.0]).unwrap();
        FieldSeries::new(
            spec,
            vec![TimeCode::new(2000, 1).unwrap(), TimeCode::new(2000, 2).unwrap()],
            vec![vec![0.5, -1.25, 3.0, 4.5], vec![1.0, 2.0, 3.0, 4.0]],
            "",
            "",
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.cgrid");
        let s = sample_series();
        write_grid_stack(&s, &p).unwrap();
        let back = read_grid_stack(&p).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn two_writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        let s = sample_series();
        write_grid_stack(&s, &p1).unwrap();
        write_grid_stack(&s, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_times_series_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.cgrid");
        let spec = GridSpec::new(vec![0.0], vec![0.0, 180.0]).unwrap();
        let s = FieldSeries::new(spec, vec![], vec![], "", "").unwrap();
        write_grid_stack(&s, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // magic + 3 u32 + 1 lat + 2 lons, no time codes, no payload
        assert_eq!(bytes.len(), 4 + 12 + 8 + 16);
        assert_eq!(read_grid_stack(&p).unwrap(), s);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cgrid");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        let err = read_grid_stack(&p).unwrap_err();
        match err {
            GridError::Format { field, .. } => assert_eq!(field, "magic"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn truncated_payload_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cgrid");
        let s = sample_series();
        write_grid_stack(&s, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_grid_stack(&p).unwrap_err() {
            GridError::Format { field, .. } => assert_eq!(field, "payload"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn non_finite_payload_is_a_data_error_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.cgrid");
        let s = sample_series();
        write_grid_stack(&s, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // third payload value of frame 0
        let payload_start = 4 + 12 + 2 * 8 + 2 * 8 + 2 * 4;
        let nan = f64::NAN.to_le_bytes();
        bytes[payload_start + 16..payload_start + 24].copy_from_slice(&nan);
        std::fs::write(&p, &bytes).unwrap();
        match read_grid_stack(&p).unwrap_err() {
            GridError::Data { index, .. } => assert_eq!(index, 2),
            other => panic!("expected data error, got {other}"),
        }
    }

    #[test]
    fn hand_built_file_decodes_to_known_payload() {
        // 2x2 grid, 1 time step, values 0..3, lats {-45, 45}, lons {0, 180}
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CGR1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for lat in [-45.0f64, 45.0] {
            bytes.extend_from_slice(&lat.to_le_bytes());
        }
        for lon in [0.0f64, 180.0] {
            bytes.extend_from_slice(&lon.to_le_bytes());
        }
        bytes.extend_from_slice(&200001i32.to_le_bytes());
        for v in [0.0f64, 1.0, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hand.cgrid");
        std::fs::write(&p, &bytes).unwrap();
        let s = read_grid_stack(&p).unwrap();
        assert_eq!(s.spec.lats(), &[-45.0, 45.0]);
        assert_eq!(s.spec.lons(), &[0.0, 180.0]);
        assert_eq!(s.times, vec![TimeCode::new(2000, 1).unwrap()]);
        assert_eq!(s.frames, vec![vec![0.0, 1.0, 2.0, 3.0]]);
        // re-encoding reproduces the exact bytes
        let p2 = dir.path().join("hand2.cgrid");
        write_grid_stack(&s, &p2).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), bytes);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_property(
            n_lat in 1usize..5,
            n_lon in 1usize..5,
            n_time in 0usize..4,
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = crate::util::derive_rng(seed, &[n_lat as u64, n_lon as u64]);
            let lats: Vec<f64> = (0..n_lat).map(|i| -80.0 + 10.0 * i as f64).collect();
            let lons: Vec<f64> = (0..n_lon).map(|i| 5.0 + 15.0 * i as f64).collect();
            let spec = GridSpec::new(lats, lons).unwrap();
            let times: Vec<TimeCode> =
                (0..n_time).map(|i| TimeCode::new(1990 + i as i32, 6).unwrap()).collect();
            let frames: Vec<Vec<f64>> = (0..n_time)
                .map(|_| (0..spec.len()).map(|_| rng.gen_range(-1e6..1e6)).collect())
                .collect();
            let s = FieldSeries::new(spec, times, frames, "", "").unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("prop.cgrid");
            write_grid_stack(&s, &p).unwrap();
            prop_assert_eq!(read_grid_stack(&p).unwrap(), s);
        }
    }
}
