//! CSV rows and PGM image dumps for experiment output.

use crate::flsim::RoundReport;
use std::fmt::Write;

pub const ROUNDS_HEADER: &str = "round,accuracy,bytes_up,bytes_down,mean_entropy,defense_method";
pub const ATTACK_HEADER: &str = "example_id,defense,attack_mode,mse,psnr,ssim";
pub const SWEEP_HEADER: &str =
    "axis,value,final_accuracy,mean_attack_mse,comm_reduction_pct,mean_entropy";

/// Shortest round-trip form; exponent notation outside `[1e-4, 1e15)`.
fn num(v: f64) -> String {
    let a = v.abs();
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn rounds_csv(reports: &[RoundReport], defense_method: &str) -> String {
    let mut s = String::from(ROUNDS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.round,
            num(r.accuracy),
            r.bytes_up,
            r.bytes_down,
            num(r.mean_entropy),
            defense_method
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    /// Example index, or `mean` for a summary row.
    pub example_id: String,
    pub defense: String,
    pub attack_mode: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl AttackRow {
    /// Summary row averaging `rows`; PSNR is recomputed from the mean MSE.
    pub fn mean_of(rows: &[AttackRow], defense: &str, attack_mode: &str) -> Option<AttackRow> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
        Some(AttackRow {
            example_id: "mean".into(),
            defense: defense.into(),
            attack_mode: attack_mode.into(),
            mse,
            psnr: crate::metrics::psnr_from_mse(mse),
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        })
    }
}

pub fn attack_csv(rows: &[AttackRow]) -> String {
    let mut s = String::from(ATTACK_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.example_id,
            r.defense,
            r.attack_mode,
            num(r.mse),
            num(r.psnr),
            num(r.ssim)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub final_accuracy: f64,
    pub mean_attack_mse: f64,
    pub comm_reduction_pct: f64,
    pub mean_entropy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.axis,
            num(r.value),
            num(r.final_accuracy),
            num(r.mean_attack_mse),
            num(r.comm_reduction_pct),
            num(r.mean_entropy)
        );
    }
    s
}

/// ASCII PGM (P2) with 255 grey levels; values are clamped to `[0, 1]`.
pub fn pgm(pixels: &[f64], side: usize) -> String {
    let mut s = format!("P2\n{side} {side}\n255\n");
    for row in pixels.chunks(side) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_csv_has_header_and_rows() {
        let r = RoundReport {
            round: 0,
            accuracy: 0.5,
            client_ids: vec![0],
            client_entropies: vec![],
            weights: vec![],
            bytes_up: 10,
            bytes_down: 20,
            mean_entropy: 1.25,
        };
        let csv = rounds_csv(&[r.clone(), RoundReport { round: 1, ..r }], "none");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            vec![
                ROUNDS_HEADER,
                "0,0.5,10,20,1.25,none",
                "1,0.5,10,20,1.25,none"
            ]
        );
    }

    #[test]
    fn attack_rows_and_summary() {
        let rows = vec![
            AttackRow {
                example_id: "0".into(),
                defense: "none".into(),
                attack_mode: "none".into(),
                mse: 0.0,
                psnr: f64::INFINITY,
                ssim: 1.0,
            },
            AttackRow {
                example_id: "1".into(),
                defense: "none".into(),
                attack_mode: "none".into(),
                mse: 0.02,
                psnr: 16.9,
                ssim: 0.5,
            },
        ];
        let mean = AttackRow::mean_of(&rows, "none", "none").unwrap();
        assert!((mean.mse - 0.01).abs() < 1e-15);
        assert!((mean.psnr - 20.0).abs() < 1e-9);
        let csv = attack_csv(&rows);
        assert!(csv.lines().nth(1).unwrap().contains(",inf,"));
    }

    #[test]
    fn numbers_round_trip() {
        for v in [
            0.0,
            0.5,
            1.25e-3,
            2.382805141289525e-32,
            3.5e17,
            -7e-9,
            316.229,
        ] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(2.5e-32), "2.5e-32");
        assert_eq!(num(0.001), "0.001");
    }

    #[test]
    fn pgm_layout() {
        let p = pgm(&[0.0, 1.0, 0.5, 2.0], 2);
        assert_eq!(p, "P2\n2 2\n255\n0 255\n128 255\n");
    }
}
