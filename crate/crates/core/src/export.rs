//! Per-step expert encodings and attention weights for offline
//! visualization.

use std::io::Write;

use rand::Rng;

use crate::envs::{Env, TaskSpec, VariantChoice};
use crate::error::{Error, Result};
use crate::model::CmtaParams;

pub const DEFAULT_EXPORT_EPISODES: usize = 10;

pub fn embedding_header(encoding_dim: usize) -> String {
    let dims: Vec<String> = (0..encoding_dim).map(|i| format!("dim_{i}")).collect();
    format!("task_id,episode,step,expert_index,{},alpha", dims.join(","))
}

/// Rolls out the deterministic policy for `episodes` per task and writes one
/// row per (step, expert). Returns the number of data rows written.
pub fn export_embeddings<W: Write, R: Rng + ?Sized>(
    model: &CmtaParams,
    tasks: &[TaskSpec],
    episodes: usize,
    horizon: usize,
    rng: &mut R,
    out: &mut W,
) -> Result<usize> {
    if episodes == 0 {
        return Err(Error::input("export needs at least one episode per task"));
    }
    if tasks.len() != model.config.n_tasks {
        return Err(Error::input(format!(
            "model was built for {} tasks, suite has {}",
            model.config.n_tasks,
            tasks.len()
        )));
    }
    writeln!(out, "{}", embedding_header(model.config.encoding_dim()))?;
    let mut rows = 0;
    for (task_id, spec) in tasks.iter().enumerate() {
        let mut env = Env::new(spec.clone(), horizon);
        for episode in 0..episodes {
            env.reset(VariantChoice::Random, rng)?;
            let mut hidden = model.zero_state();
            for step in 0.. {
                let obs = env.observation();
                let f = model.forward(&obs, task_id, &hidden)?;
                for (j, enc) in f.expert_encodings.iter().enumerate() {
                    let mut line = format!("{task_id},{episode},{step},{j}");
                    for v in enc {
                        line.push(',');
                        line.push_str(&v.to_string());
                    }
                    writeln!(out, "{line},{}", f.alpha.alpha[j])?;
                    rows += 1;
                }
                let (mut actions, mut next) =
                    model.act(&[obs], &[task_id], std::slice::from_ref(&hidden), None)?;
                hidden = next.remove(0);
                if env.step(&actions.remove(0))?.done {
                    break;
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::register_suite;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_cover_every_step_and_expert() {
        let tasks = register_suite("MT3-Fixed").unwrap();
        let mut c = ModelConfig::new(8, 2, 3);
        c.n_experts = 3;
        c.expert_layers = vec![4];
        c.task_embedding_dim = 2;
        c.task_layers = vec![2];
        c.lstm_hidden = 2;
        c.actor_hidden = vec![4];
        c.critic_hidden = vec![4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CmtaParams::new(c, &mut rng).unwrap();
        let mut buf = Vec::new();
        let rows = export_embeddings(&model, &tasks, 2, 7, &mut rng, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "task_id,episode,step,expert_index,dim_0,dim_1,dim_2,dim_3,alpha"
        );
        // untrained policy never succeeds within 7 steps: 3 tasks x 2 episodes x 7 steps x 3 experts
        assert_eq!(rows, 3 * 2 * 7 * 3);
        assert_eq!(lines.count(), rows);
        let experts: std::collections::BTreeSet<&str> =
            text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
        assert_eq!(experts.into_iter().collect::<Vec<_>>(), vec!["0", "1", "2"]);
    }
}
