//! CSV and Markdown formatting of benchmark results.

use nerfcodec::codec::pack;
use nerfcodec::entropy::{megabytes, SizeReport};
use nerfcodec::peft::{prepare, Mode};
use nerfcodec::render::{Decoder, SceneModel};
use nerfcodec::triplane::Triplanes;
use nerfcodec::{Profile, Result};

/// Prefixes every CSV record with the mode.
pub fn with_mode_column(csv: &str, mode: Mode) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let first = if i == 0 { "mode".to_string() } else { mode.to_string() };
        out.push_str(&first);
        out.push(',');
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Component sizes in MB, one column per mode.
pub fn size_table(rows: &[(Mode, SizeReport)]) -> String {
    let mut s = String::from("| Component (MB) |");
    for (m, _) in rows {
        s.push_str(&format!(" {m} |"));
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(rows.len()));
    s.push('\n');
    let lines: [(&str, fn(&SizeReport) -> usize); 5] = [
        ("Codes", |r| r.codes),
        ("Feature", |r| r.feature),
        ("MLP", |r| r.mlp),
        ("Header", |r| r.header),
        ("Total", |r| r.total),
    ];
    for (name, get) in lines {
        s.push_str(&format!("| {name} |"));
        for (_, r) in rows {
            s.push_str(&format!(" {:.3} |", megabytes(get(r))));
        }
        s.push('\n');
    }
    s
}

/// Sizes of the untrained-parameter modes at `p`, from zero-valued
/// representations. Entropy-coded sizes depend on the data and are absent.
pub fn analytic_sizes(p: &Profile) -> Result<Vec<(Mode, SizeReport)>> {
    let idx: [Vec<usize>; 3] = std::array::from_fn(|_| vec![0; p.code_res().pow(2)]);
    let mut scene = SceneModel {
        planes: Triplanes::zeros(p.channels, p.resolutions),
        delta: None,
        decoder: Decoder::new(p, 0),
    };
    let mut out = Vec::new();
    for mode in [Mode::FullFt, Mode::Peft, Mode::WoFt] {
        prepare(&mut scene, mode, p.delta_rank, p.lora_rank, 0)?;
        out.push((mode, pack(p, mode, &idx, &scene, None)?.size_report()));
    }
    Ok(out)
}
