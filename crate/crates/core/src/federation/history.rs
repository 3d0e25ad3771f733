use std::fmt;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "round,client,split,mask_kind,psnr_db,ssim,loss";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Seen,
    Unseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Seen => "seen",
            MaskKind::Unseen => "unseen",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub client: usize,
    pub split: Split,
    pub mask_kind: MaskKind,
    pub psnr_db: f64,
    pub ssim: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<MetricsRecord>,
}

impl MetricsHistory {
    pub fn rounds(&self) -> usize {
        self.records.last().map_or(0, |r| r.round + 1)
    }

    /// Mean of `f` over the records matching `split` and `mask_kind` in `round`.
    pub fn mean_at(
        &self,
        round: usize,
        split: Split,
        mask_kind: MaskKind,
        f: impl Fn(&MetricsRecord) -> f64,
    ) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.round == round && r.split == split && r.mask_kind == mask_kind)
            .map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round,
                r.client,
                r.split,
                r.mask_kind,
                sig6(r.psnr_db),
                sig6(r.ssim),
                sig6(r.loss)
            ));
        }
        out
    }
}

/// Six significant digits in the style of C's `%g`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

fn trim(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_matches_printf_g() {
        let cases = [
            (20.0, "20"),
            (6.020599913279624, "6.0206"),
            (0.123456789, "0.123457"),
            (99.0, "99"),
            (-0.5, "-0.5"),
            (9.9999996, "10"),
            (1234567.0, "1.23457e6"),
            (0.0000123456, "1.23456e-5"),
            (0.000123456, "0.000123456"),
            (123456.4, "123456"),
        ];
        for (x, want) in cases {
            assert_eq!(sig6(x), want, "{x}");
        }
    }

    #[test]
    fn csv_layout() {
        let h = MetricsHistory {
            records: vec![MetricsRecord {
                round: 0,
                client: 2,
                split: Split::Test,
                mask_kind: MaskKind::Unseen,
                psnr_db: 25.123456,
                ssim: 0.8,
                loss: 0.003,
            }],
        };
        assert_eq!(
            h.to_csv(),
            format!("{CSV_HEADER}\n0,2,test,unseen,25.1235,0.8,0.003\n")
        );
        assert_eq!(h.rounds(), 1);
    }
}
