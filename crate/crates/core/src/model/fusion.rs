//! Fusing cached SSL representations into the subsampled fbank stream.
//!
//! Both mechanisms first project each SSL sequence to the model width
//! (linear then layer norm). SFA then adds stride-aligned SSL frames to the
//! fbank frames; CA attends from fbank queries to the full SSL sequence and
//! adds the attended summary residually.

use std::fs;
use std::path::Path;

use super::attention::{init_attention_params, multi_head_attention};
use super::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Head-averaged attention map of one CA source, kept for export.
#[derive(Debug, Clone)]
pub struct AttentionExport {
    pub source_tag: String,
    /// [L_sub, T'] rows over query frames.
    pub weights: Tensor,
}

pub fn init_fusion_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    if cfg.fusion.mode == FusionMode::None {
        return Ok(());
    }
    let d = cfg.d_model;
    for (k, &dp) in cfg.fusion.ssl_dims.iter().enumerate() {
        let p = format!("fusion.src{k}");
        init.linear(store, &format!("{p}.proj.weight"), dp, d)?;
        init.zeros(store, &format!("{p}.proj.bias"), vec![d])?;
        init.ones(store, &format!("{p}.norm.gain"), vec![d])?;
        init.zeros(store, &format!("{p}.norm.bias"), vec![d])?;
        if matches!(cfg.fusion.mode, FusionMode::Ca | FusionMode::MultiCa) {
            init_attention_params(init, store, &format!("{p}.att"), d)?;
        }
    }
    Ok(())
}

/// v-hat = layer_norm(W v + b) per frame; [T', d'] to [T', d].
pub fn project_ssl(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    source: usize,
    ssl_frames: NodeId,
) -> Result<NodeId> {
    let want = *cfg.fusion.ssl_dims.get(source).ok_or_else(|| {
        Error::Config(format!("no configured SSL source {source}"))
    })?;
    let got = tape.value(ssl_frames).cols();
    if got != want {
        return Err(Error::Shape(format!(
            "SSL source {source} is {got} wide, projection expects {want}"
        )));
    }
    let p = format!("fusion.src{source}");
    let w = bind.get(tape, &format!("{p}.proj.weight"))?;
    let b = bind.get(tape, &format!("{p}.proj.bias"))?;
    let gain = bind.get(tape, &format!("{p}.norm.gain"))?;
    let nbias = bind.get(tape, &format!("{p}.norm.bias"))?;
    let xw = tape.matmul(ssl_frames, w)?;
    let lin = tape.add_row(xw, b)?;
    tape.layer_norm(lin, gain, nbias, cfg.ln_eps)
}

/// 0-based row of v-hat paired with fbank frame `i` (0-based): the formula
/// min(T', s_v * i) over 1-based positions.
pub fn sfa_index(i: usize, t_prime: usize, sv: usize) -> usize {
    (sv * (i + 1)).min(t_prime) - 1
}

/// h0_i = u-hat_i + v-hat[min(T', s_v * i)], 1-based. Zero parameters.
pub fn fuse_sfa(tape: &mut Tape, u_hat: NodeId, v_hat: NodeId, sv: usize) -> Result<NodeId> {
    if sv == 0 {
        return Err(Error::Config("ssl subsample factor s_v must be >= 1".into()));
    }
    let l_sub = tape.value(u_hat).rows();
    let t_prime = tape.value(v_hat).rows();
    if tape.value(u_hat).cols() != tape.value(v_hat).cols() {
        return Err(Error::Shape(format!(
            "fuse_sfa width mismatch: {:?} vs {:?}",
            tape.value(u_hat).shape(),
            tape.value(v_hat).shape()
        )));
    }
    let indices: Vec<usize> = (0..l_sub).map(|i| sfa_index(i, t_prime, sv)).collect();
    let gathered = tape.gather_rows(v_hat, &indices)?;
    tape.add(u_hat, gathered)
}

/// h0 = u-hat + MultiHeadAttention(u-hat, v-hat, v-hat). Also returns the
/// head-averaged attention map.
pub fn fuse_ca(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    source: usize,
    u_hat: NodeId,
    v_hat: NodeId,
) -> Result<(NodeId, Tensor)> {
    let prefix = format!("fusion.src{source}.att");
    let (attended, weights) =
        multi_head_attention(tape, bind, &prefix, u_hat, v_hat, cfg.heads, None)?;
    let fused = tape.add(u_hat, attended)?;
    Ok((fused, weights))
}

/// One independent CA block per source; h0 = u-hat + sum of attended outputs.
pub fn fuse_multi_ca(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    u_hat: NodeId,
    v_hats: &[NodeId],
) -> Result<(NodeId, Vec<Tensor>)> {
    if v_hats.is_empty() {
        return Err(Error::Config("multi-source fusion called with no sources".into()));
    }
    let mut h = u_hat;
    let mut maps = Vec::with_capacity(v_hats.len());
    for (k, &v_hat) in v_hats.iter().enumerate() {
        let prefix = format!("fusion.src{k}.att");
        let (attended, weights) =
            multi_head_attention(tape, bind, &prefix, u_hat, v_hat, cfg.heads, None)?;
        h = tape.add(h, attended)?;
        maps.push(weights);
    }
    Ok((h, maps))
}

/// Project every raw SSL sequence and fuse according to the configured mode.
/// Mode NONE passes u-hat through untouched and ignores the inputs.
pub fn fuse(
    tape: &mut Tape,
    bind: &mut Binding,
    cfg: &ModelConfig,
    u_hat: NodeId,
    ssl_inputs: &[(String, NodeId)],
) -> Result<(NodeId, Vec<AttentionExport>)> {
    match cfg.fusion.mode {
        FusionMode::None => Ok((u_hat, Vec::new())),
        FusionMode::Sfa => {
            let (_, frames) = expect_sources(cfg, ssl_inputs, 1)?[0];
            let v_hat = project_ssl(tape, bind, cfg, 0, frames)?;
            Ok((fuse_sfa(tape, u_hat, v_hat, cfg.fusion.sv)?, Vec::new()))
        }
        FusionMode::Ca => {
            let (tag, frames) = expect_sources(cfg, ssl_inputs, 1)?[0];
            let v_hat = project_ssl(tape, bind, cfg, 0, frames)?;
            let (h, weights) = fuse_ca(tape, bind, cfg, 0, u_hat, v_hat)?;
            Ok((h, vec![AttentionExport { source_tag: tag.to_string(), weights }]))
        }
        FusionMode::MultiCa => {
            let sources = expect_sources(cfg, ssl_inputs, cfg.fusion.ssl_dims.len())?;
            let mut v_hats = Vec::with_capacity(sources.len());
            for (k, &(_, frames)) in sources.iter().enumerate() {
                v_hats.push(project_ssl(tape, bind, cfg, k, frames)?);
            }
            let (h, maps) = fuse_multi_ca(tape, bind, cfg, u_hat, &v_hats)?;
            let exports = sources
                .iter()
                .zip(maps)
                .map(|(&(tag, _), weights)| AttentionExport { source_tag: tag.to_string(), weights })
                .collect();
            Ok((h, exports))
        }
    }
}

fn expect_sources<'a>(
    cfg: &ModelConfig,
    ssl_inputs: &'a [(String, NodeId)],
    want: usize,
) -> Result<Vec<(&'a str, NodeId)>> {
    if ssl_inputs.len() != want {
        return Err(Error::Input(format!(
            "fusion mode {} expects {want} SSL input(s), got {}",
            cfg.fusion.mode.as_str(),
            ssl_inputs.len()
        )));
    }
    Ok(ssl_inputs.iter().map(|(t, id)| (t.as_str(), *id)).collect())
}

/// CSV export of one attention map. First line carries the metadata values
/// (utterance_id, L_sub, T_prime, source_tag); each following line is one
/// query frame's weights over key frames.
pub fn write_attention_csv(
    path: &Path,
    utterance_id: &str,
    export: &AttentionExport,
) -> Result<()> {
    let w = &export.weights;
    let mut out = String::new();
    out.push_str(&format!(
        "{utterance_id},{},{},{}\n",
        w.rows(),
        w.cols(),
        export.source_tag
    ));
    for i in 0..w.rows() {
        let row: Vec<String> = w.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a file written by [`write_attention_csv`].
pub fn read_attention_csv(path: &Path) -> Result<(String, AttentionExport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty attention file", path.display())))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 4 {
        return Err(Error::Format(format!(
            "{}: header needs utterance_id,L_sub,T_prime,source_tag",
            path.display()
        )));
    }
    let rows: usize = fields[1]
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad L_sub {}", path.display(), fields[1])))?;
    let cols: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad T_prime {}", path.display(), fields[2])))?;
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines {
        for v in line.split(',') {
            data.push(v.parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: bad weight {v:?}", path.display()))
            })?);
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "{}: header declares {rows}x{cols} weights, found {}",
            path.display(),
            data.len()
        )));
    }
    Ok((
        fields[0].to_string(),
        AttentionExport {
            source_tag: fields[3].to_string(),
            weights: Tensor::new(vec![rows, cols], data)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ca_config(dims: Vec<usize>, mode: FusionMode) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.fusion = FusionConfig { mode, ssl_dims: dims, sv: 2 };
        cfg
    }

    fn fusion_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_fusion_params(&mut Init::new(seed), &mut store, cfg).unwrap();
        store
    }

    #[test]
    fn sfa_matches_the_worked_example() {
        let mut tape = Tape::new();
        let u = tape.leaf(
            Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap(),
            false,
        );
        let v_data: Vec<f64> = (1..=6).flat_map(|i| [i as f64 / 10.0; 2]).collect();
        let v = tape.leaf(Tensor::new(vec![6, 2], v_data).unwrap(), false);
        let h = fuse_sfa(&mut tape, u, v, 2).unwrap();
        let want = [1.2, 0.2, 0.4, 1.4, 2.6, 2.6];
        for (a, b) in tape.value(h).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sfa_with_zero_ssl_is_identity() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap(), false);
        let v = tape.leaf(Tensor::filled(vec![5, 3], 0.0), false);
        let h = fuse_sfa(&mut tape, u, v, 2).unwrap();
        assert_eq!(tape.value(h).data(), tape.value(u).data());
    }

    #[test]
    fn sfa_clamps_to_the_last_ssl_frame() {
        // T'=5, L_sub=3, s_v=2: frames pair with v-hat rows 2, 4, 5 (1-based)
        assert_eq!(sfa_index(0, 5, 2), 1);
        assert_eq!(sfa_index(1, 5, 2), 3);
        assert_eq!(sfa_index(2, 5, 2), 4);
    }

    #[test]
    fn projection_preserves_length_and_normalizes_constant_rows() {
        let cfg = ca_config(vec![5], FusionMode::Sfa);
        let mut store = ParamStore::new();
        // all-ones weight, zero bias: every projected coordinate is the same
        // input-row sum, so layer norm sends each row to the zero vector
        store.register("fusion.src0.proj.weight", Tensor::filled(vec![5, 8], 1.0)).unwrap();
        store.register("fusion.src0.proj.bias", Tensor::filled(vec![8], 0.0)).unwrap();
        store.register("fusion.src0.norm.gain", Tensor::filled(vec![8], 1.0)).unwrap();
        store.register("fusion.src0.norm.bias", Tensor::filled(vec![8], 0.0)).unwrap();

        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let v = tape.leaf(Tensor::filled(vec![7, 5], 3.25), false);
        let vh = project_ssl(&mut tape, &mut bind, &cfg, 0, v).unwrap();
        assert_eq!(tape.value(vh).shape(), &[7, 8]);
        assert!(tape.value(vh).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let cfg = ca_config(vec![5], FusionMode::Sfa);
        let store = fusion_store(&cfg, 4);
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let v = tape.leaf(Tensor::filled(vec![7, 6], 0.0), false);
        assert!(matches!(
            project_ssl(&mut tape, &mut bind, &cfg, 0, v),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ca_fusion_is_invariant_to_key_value_permutation() {
        let cfg = ca_config(vec![6], FusionMode::Ca);
        let store = fusion_store(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u_data: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v_data: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |perm: &[usize]| {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&store, false);
            let u = tape.leaf(Tensor::new(vec![4, 8], u_data.clone()).unwrap(), false);
            let permuted: Vec<f64> =
                perm.iter().flat_map(|&i| v_data[i * 6..(i + 1) * 6].to_vec()).collect();
            let v = tape.leaf(Tensor::new(vec![5, 6], permuted).unwrap(), false);
            let vh = project_ssl(&mut tape, &mut bind, &cfg, 0, v).unwrap();
            let (h, w) = fuse_ca(&mut tape, &mut bind, &cfg, 0, u, vh).unwrap();
            (tape.value(h).clone(), w)
        };

        let (h_id, w_id) = run(&[0, 1, 2, 3, 4]);
        let perm = [3, 0, 4, 1, 2];
        let (h_pm, w_pm) = run(&perm);
        assert!(h_id.max_abs_diff(&h_pm) < 1e-9);
        // exported attention permutes its columns with the keys
        for i in 0..4 {
            for (jp, &jo) in perm.iter().enumerate() {
                assert!((w_id.at2(i, jo) - w_pm.at2(i, jp)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multi_ca_with_zero_value_projections_is_identity() {
        let cfg = ca_config(vec![6, 6], FusionMode::MultiCa);
        let mut store = fusion_store(&cfg, 13);
        for k in 0..2 {
            for part in ["weight", "bias"] {
                let name = format!("fusion.src{k}.att.v.{part}");
                let t = store.get_mut(&name).unwrap();
                t.data_mut().fill(0.0);
                let name = format!("fusion.src{k}.att.o.{part}");
                let t = store.get_mut(&name).unwrap();
                t.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let u = tape.leaf(Tensor::filled(vec![3, 8], 0.7), false);
        let v0 = tape.leaf(Tensor::filled(vec![4, 6], 0.2), false);
        let v1 = tape.leaf(Tensor::filled(vec![6, 6], -0.4), false);
        let vh0 = project_ssl(&mut tape, &mut bind, &cfg, 0, v0).unwrap();
        let vh1 = project_ssl(&mut tape, &mut bind, &cfg, 1, v1).unwrap();
        let (h, maps) = fuse_multi_ca(&mut tape, &mut bind, &cfg, u, &[vh0, vh1]).unwrap();
        assert_eq!(maps.len(), 2);
        assert!(tape
            .value(h)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn single_source_multi_ca_degenerates_to_fuse_ca() {
        let cfg = ca_config(vec![6], FusionMode::Ca);
        let store = fusion_store(&cfg, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u_data: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v_data: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let mut bind = Binding::new(&store, false);
        let u = tape.leaf(Tensor::new(vec![3, 8], u_data.clone()).unwrap(), false);
        let v = tape.leaf(Tensor::new(vec![5, 6], v_data.clone()).unwrap(), false);
        let vh = project_ssl(&mut tape, &mut bind, &cfg, 0, v).unwrap();
        let (h_single, _) = fuse_ca(&mut tape, &mut bind, &cfg, 0, u, vh).unwrap();
        let (h_multi, _) = fuse_multi_ca(&mut tape, &mut bind, &cfg, u, &[vh]).unwrap();
        assert_eq!(tape.value(h_single).data(), tape.value(h_multi).data());
    }

    #[test]
    fn attention_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attn.csv");
        let export = AttentionExport {
            source_tag: "hubert-base".into(),
            weights: Tensor::new(vec![2, 3], vec![0.25, 0.5, 0.25, 0.1, 0.2, 0.7]).unwrap(),
        };
        write_attention_csv(&path, "utt-9", &export).unwrap();
        let (id, back) = read_attention_csv(&path).unwrap();
        assert_eq!(id, "utt-9");
        assert_eq!(back.source_tag, "hubert-base");
        assert_eq!(back.weights.data(), export.weights.data());
    }
}
