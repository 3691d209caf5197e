//! Learnable-scalar and multiply-accumulate counts for the neck.

use fgaa_tensor::{Conv2d, Init, Module};
use serde::Serialize;

use crate::neck::{FgaaNeck, NeckConfig};
use crate::{Level, Result};

/// Stated in every report: the reference hidden widths are not published,
/// so only order-of-magnitude agreement is meaningful.
pub const PARITY_NOTE: &str = "exact parity with published neck sizes is impossible: \
the hidden widths of the foreground head, weight generator and attention projections \
are unspecified, so this count reflects this implementation's choices (C/4 hidden width, \
attention width = C)";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub module: String,
    pub level: Option<Level>,
    pub params: usize,
    /// Multiply-accumulates at the configured image size; normalisation and
    /// element-wise work are not counted.
    pub macs: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub channels: usize,
    pub in_widths: [usize; 3],
    pub image_size: usize,
    pub rows: Vec<ParamRow>,
    pub neck_params: usize,
    pub neck_macs: u64,
    pub note: &'static str,
}

fn conv_macs(conv: &Conv2d, extent: usize) -> u64 {
    conv.macs(extent, extent)
}

/// Counts for a neck on `in_widths` backbone features of a square image.
pub fn count_parameters(
    config: &NeckConfig,
    in_widths: [usize; 3],
    image_size: usize,
) -> Result<ParamReport> {
    let neck = FgaaNeck::new(config, in_widths, &mut Init::new(0), 0)?;
    let ext = |l: Level| l.extent(image_size);
    let mut rows = Vec::new();
    let fpn = &neck.fpn;
    let bl = [Level::P3, Level::P4, Level::P5];
    for (i, &l) in bl.iter().enumerate() {
        rows.push(ParamRow {
            module: "fpn.lateral".into(),
            level: Some(l),
            params: fpn.lateral[i].num_params(),
            macs: conv_macs(&fpn.lateral[i], ext(l)),
        });
    }
    for (i, &l) in bl.iter().enumerate() {
        rows.push(ParamRow {
            module: "fpn.smooth".into(),
            level: Some(l),
            params: fpn.smooth[i].num_params(),
            macs: conv_macs(&fpn.smooth[i], ext(l)),
        });
    }
    rows.push(ParamRow {
        module: "fpn.extra".into(),
        level: Some(Level::P6),
        params: fpn.p6.num_params(),
        macs: conv_macs(&fpn.p6, ext(Level::P5)),
    });
    rows.push(ParamRow {
        module: "fpn.extra".into(),
        level: Some(Level::P7),
        params: fpn.p7.num_params(),
        macs: conv_macs(&fpn.p7, ext(Level::P6)),
    });
    for (&l, m) in &neck.fgfm {
        let e = ext(l);
        let macs = [&m.head_conv1, &m.head_conv2, &m.gen_conv3, &m.gen_conv1]
            .iter()
            .map(|c| conv_macs(c, e))
            .sum();
        rows.push(ParamRow {
            module: "fgfm".into(),
            level: Some(l),
            params: m.num_params(),
            macs,
        });
    }
    for (&l, m) in &neck.aamha {
        let e = ext(l);
        let proj: u64 = [&m.proj_q, &m.proj_k, &m.proj_v, &m.proj_o]
            .iter()
            .map(|c| conv_macs(c, e))
            .sum();
        rows.push(ParamRow {
            module: "aamha".into(),
            level: Some(l),
            params: m.num_params(),
            macs: proj + m.attention_macs(e * e),
        });
    }
    let neck_params = rows.iter().map(|r| r.params).sum();
    debug_assert_eq!(neck_params, neck.num_params());
    let neck_macs = rows.iter().map(|r| r.macs).sum();
    Ok(ParamReport {
        channels: config.channels,
        in_widths,
        image_size,
        rows,
        neck_params,
        neck_macs,
        note: PARITY_NOTE,
    })
}

/// Full placement at C = 256 on 512/1024/2048-wide features, 1024² image.
pub fn reference_scale_report() -> Result<ParamReport> {
    count_parameters(&NeckConfig::reference(), [512, 1024, 2048], 1024)
}

impl ParamReport {
    pub fn subtotal(&self, module_prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.module.starts_with(module_prefix))
            .map(|r| r.params)
            .sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "neck C={} inputs={:?} image={}x{}\n{:<12} {:>5} {:>12} {:>10}\n",
            self.channels,
            self.in_widths,
            self.image_size,
            self.image_size,
            "module",
            "level",
            "params",
            "GMACs"
        );
        for r in &self.rows {
            let level = r.level.map(|l| l.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{:<12} {:>5} {:>12} {:>10.3}\n",
                r.module,
                level,
                r.params,
                r.macs as f64 / 1e9
            ));
        }
        for m in ["fpn", "fgfm", "aamha"] {
            s.push_str(&format!(
                "{:<12} {:>5} {:>12}\n",
                format!("{m} total"),
                "",
                self.subtotal(m)
            ));
        }
        s.push_str(&format!(
            "{:<12} {:>5} {:>12} {:>10.3}\n",
            "neck total",
            "",
            self.neck_params,
            self.neck_macs as f64 / 1e9
        ));
        s.push_str(&format!("note: {}\n", self.note));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        let cfg = NeckConfig {
            channels: 16,
            heads: 4,
            ..NeckConfig::default()
        };
        let r = count_parameters(&cfg, [32, 64, 128], 64).unwrap();
        let c = 16;
        let lat: usize = [32, 64, 128].iter().map(|ci| ci * c + c).sum();
        let row = |m: &str, l: Level| {
            r.rows
                .iter()
                .find(|x| x.module == m && x.level == Some(l))
                .unwrap()
                .clone()
        };
        assert_eq!(r.subtotal("fpn.lateral"), lat);
        assert_eq!(row("fpn.smooth", Level::P3).params, 9 * c * c + c);
        let hid = 4;
        // head (C→hid 3×3, hid→1 3×3), generator (C+1→hid 3×3, GN, hid→C 1×1), four scalars
        let fg =
            9 * c * hid + hid + 9 * hid + 1 + 9 * (c + 1) * hid + hid + 2 * hid + hid * c + c + 4;
        assert_eq!(row("fgfm", Level::P4).params, fg);
        // four 1×1 projections, 4 prototypes × 2, GN affine
        assert_eq!(row("aamha", Level::P6).params, 4 * (c * c + c) + 8 + 2 * c);
        assert_eq!(row("fpn.lateral", Level::P3).macs, (32 * c * 8 * 8) as u64);
    }

    #[test]
    fn quadratic_scaling() {
        let at = |c: usize| {
            let cfg = NeckConfig {
                channels: c,
                ..NeckConfig::default()
            };
            count_parameters(&cfg, [2 * c, 4 * c, 8 * c], 64)
                .unwrap()
                .neck_params as f64
        };
        let ratio = at(64) / at(32);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn report_states_parity_caveat() {
        let cfg = NeckConfig {
            channels: 8,
            heads: 2,
            ..NeckConfig::default()
        };
        let r = count_parameters(&cfg, [16, 32, 64], 64).unwrap();
        assert!(r.to_table().contains("exact parity"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["neck_params"], r.neck_params);
    }
}
