use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::{KPoint, Trajectory};

pub const TRAJECTORY_CSV_HEADER: &str = "frame,shot,index,kx,ky";

/// Writes `frame,shot,index,kx,ky` rows with 17 significant digits.
pub fn write_trajectory_csv<W: Write>(mut out: W, traj: &Trajectory) -> Result<()> {
    writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
    for f in 0..traj.n_frames() {
        for s in 0..traj.n_shots() {
            for (i, p) in traj.shot_samples(f, s).iter().enumerate() {
                writeln!(out, "{f},{s},{i},{:.16e},{:.16e}", p.kx, p.ky)?;
            }
        }
    }
    Ok(())
}

/// Reads a sample file back into a trajectory whose control points are the
/// samples themselves. Rows may come in any order; every
/// `(frame, shot, index)` cell must be present exactly once.
pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Trajectory> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != TRAJECTORY_CSV_HEADER {
        return Err(Error::Format(format!("unexpected trajectory header {header:?}")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", n + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let idx = |i: usize| fields[i].trim().parse::<usize>().map_err(|_| bad("bad integer"));
        let val = |i: usize| fields[i].trim().parse::<f64>().map_err(|_| bad("bad number"));
        rows.push((idx(0)?, idx(1)?, idx(2)?, KPoint::new(val(3)?, val(4)?)));
    }
    if rows.is_empty() {
        return Err(Error::Format("trajectory file has no samples".into()));
    }
    let n_frames = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let n_shots = rows.iter().map(|r| r.1).max().unwrap() + 1;
    let m_points = rows.iter().map(|r| r.2).max().unwrap() + 1;
    let total = n_frames * n_shots * m_points;
    if rows.len() != total {
        return Err(Error::Format(format!("expected {total} samples, found {}", rows.len())));
    }
    let mut samples = vec![None; total];
    for (f, s, i, p) in rows {
        let slot = &mut samples[(f * n_shots + s) * m_points + i];
        if slot.replace(p).is_some() {
            return Err(Error::Format(format!("duplicate sample ({f}, {s}, {i})")));
        }
    }
    let samples = samples.into_iter().map(|p| p.expect("count checked")).collect();
    Trajectory::from_samples(n_frames, n_shots, m_points, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::golden_angle_scheme;

    #[test]
    fn round_trip_is_exact() {
        let t = golden_angle_scheme(3, 11, 2).unwrap().with_n_control(4).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &t).unwrap();
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), t.samples());
        assert_eq!(back.n_frames(), 2);
        assert!(!back.shared_across_frames());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(read_trajectory_csv("a,b\n".as_bytes()).is_err());
        assert!(read_trajectory_csv(format!("{TRAJECTORY_CSV_HEADER}\n0,0,0,0.1\n").as_bytes()).is_err());
        let dup = format!("{TRAJECTORY_CSV_HEADER}\n0,0,0,0.1,0.1\n0,0,0,0.1,0.1\n");
        assert!(read_trajectory_csv(dup.as_bytes()).is_err());
        assert!(read_trajectory_csv(format!("{TRAJECTORY_CSV_HEADER}\n").as_bytes()).is_err());
    }
}
