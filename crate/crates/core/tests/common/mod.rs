#![allow(dead_code)]

use std::path::PathBuf;

use surveyor_core::survey::{load_personas, load_questionnaire, Persona, PromptTemplate, Questionnaire};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

pub fn anes() -> Questionnaire {
    load_questionnaire(&fixture("anes/questionnaire.csv")).expect("fixture questionnaire")
}

pub fn anes_personas() -> Vec<Persona> {
    load_personas(&fixture("anes/personas.csv")).expect("fixture personas")
}

pub fn anes_template() -> PromptTemplate {
    let user = std::fs::read_to_string(fixture("anes/user_prompt.txt")).expect("fixture template");
    PromptTemplate::new(user)
        .with_answer_field("temperature")
        .with_question_stem("How do you feel towards")
}

/// Optimal transport cost between two discrete distributions with
/// |x − y| ground cost, by successive shortest paths on the bipartite
/// transport network. Independent of the CDF formula under test.
pub fn transport_cost(xs: &[f64], p: &[f64], ys: &[f64], q: &[f64]) -> f64 {
    let (n, m) = (xs.len(), ys.len());
    let nodes = n + m + 2;
    let (s, t) = (n + m, n + m + 1);
    // (to, cap, cost, rev)
    let mut g: Vec<Vec<(usize, f64, f64, usize)>> = vec![Vec::new(); nodes];
    let add = |g: &mut Vec<Vec<(usize, f64, f64, usize)>>, a: usize, b: usize, cap: f64, cost: f64| {
        let ra = g[b].len();
        let rb = g[a].len();
        g[a].push((b, cap, cost, ra));
        g[b].push((a, 0.0, -cost, rb));
    };
    for i in 0..n {
        add(&mut g, s, i, p[i], 0.0);
        for j in 0..m {
            add(&mut g, i, n + j, f64::INFINITY, (xs[i] - ys[j]).abs());
        }
    }
    for j in 0..m {
        add(&mut g, n + j, t, q[j], 0.0);
    }
    let eps = 1e-15;
    let mut total = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; nodes];
        dist[s] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u].is_infinite() {
                    continue;
                }
                for (k, &(v, cap, cost, _)) in g[u].iter().enumerate() {
                    if cap > eps && dist[u] + cost < dist[v] - 1e-12 {
                        dist[v] = dist[u] + cost;
                        prev[v] = Some((u, k));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t].is_infinite() {
            break;
        }
        let mut flow = f64::INFINITY;
        let mut v = t;
        while let Some((u, k)) = prev[v] {
            flow = flow.min(g[u][k].1);
            v = u;
        }
        if flow <= eps {
            break;
        }
        let mut v = t;
        while let Some((u, k)) = prev[v] {
            g[u][k].1 -= flow;
            let (to, rev) = (g[u][k].0, g[u][k].3);
            g[to][rev].1 += flow;
            v = u;
        }
        total += flow * dist[t];
    }
    total
}
