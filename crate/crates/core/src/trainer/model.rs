use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Readout, RunConfig};
use crate::data::{QAExample, TextAttributedGraph};
use crate::encoder::{
    attach_query_node, init_node_edge_states, run_gnn_graph, run_gnn_query, GraphFeatures,
    GraphTransformerLayer,
};
use crate::error::{Error, Result};
use crate::lm::{answer_loss, assemble_prompt, greedy_decode, lm_forward, TinyDecoderLM, Vocab};
use crate::pooling::{
    late_fusion_cross_attention, lgpt_pool, mean_pool, project, LateFusionParams, LgptParams,
    ProjectionMlp, PromptVectors, Provenance,
};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Var};

/// The trainable graph encoder: optional query fusion, structural layers, a
/// readout, optional late fusion and the projection into LM width. Only the
/// parameters the configuration uses are created.
#[derive(Clone, Debug)]
pub struct GraphPromptModel {
    config: RunConfig,
    store: ParamStore,
    query_link: Option<ParamId>,
    query_layers: Vec<GraphTransformerLayer>,
    graph_layers: Vec<GraphTransformerLayer>,
    lgpt: Option<LgptParams>,
    late: Option<LateFusionParams>,
    proj: ProjectionMlp,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: RunConfig,
    params: ParamStore,
}

/// An example with its text features computed once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: GraphFeatures,
    pub graph_text: String,
    pub query: String,
    pub answer: String,
}

impl Prepared {
    pub fn new(ex: &QAExample, d: usize) -> Result<Self> {
        Ok(Prepared {
            features: GraphFeatures::new(&ex.graph, &ex.query, d)?,
            graph_text: ex.graph.textualize(),
            query: ex.query.clone(),
            answer: ex.answer.clone(),
        })
    }
}

impl GraphPromptModel {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config)
    }

    fn build(config: &RunConfig) -> Result<Self> {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let stack = |store: &mut ParamStore, group: &str, depth: usize, rng: &mut ChaCha8Rng| {
            (0..depth)
                .map(|l| {
                    GraphTransformerLayer::init(
                        store,
                        &format!("{group}.{l}"),
                        group,
                        c.d,
                        c.heads,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let (query_link, query_layers) = if c.fusion.early() {
            let link = store.add_uniform("gnn_query.link", "gnn_query", 1, c.d, &mut rng);
            (
                Some(link),
                stack(&mut store, "gnn_query", c.l_query, &mut rng)?,
            )
        } else {
            (None, Vec::new())
        };
        let graph_layers = stack(&mut store, "gnn_graph", c.l_graph, &mut rng)?;
        let lgpt = match c.readout {
            Readout::Lgpt => Some(LgptParams::init(
                &mut store, c.n_tokens, c.d, c.heads, c.l_pool, &mut rng,
            )?),
            Readout::Mean => None,
        };
        let late = c
            .fusion
            .late()
            .then(|| LateFusionParams::init(&mut store, c.d, &mut rng));
        let proj = ProjectionMlp::init(&mut store, c.d, c.d_llm, &mut rng);
        Ok(GraphPromptModel {
            config: c.clone(),
            store,
            query_link,
            query_layers,
            graph_layers,
            lgpt,
            late,
            proj,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Config and weights as JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&SavedModel {
            config: self.config.clone(),
            params: self.store.clone(),
        })
        .expect("serializable")
    }

    /// Rebuilds the model from its config and checks that the stored weights
    /// match its parameter layout.
    pub fn from_json(text: &str) -> Result<Self> {
        let saved: SavedModel = serde_json::from_str(text)?;
        let mut model = Self::new(&saved.config)?;
        let fresh: Vec<_> = model.store.iter().map(|(id, p)| (id, p.clone())).collect();
        let stored: Vec<_> = saved.params.iter().map(|(_, p)| p).collect();
        if fresh.len() != stored.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                fresh.len(),
                stored.len()
            )));
        }
        for ((id, want), got) in fresh.into_iter().zip(stored) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
            *model.store.value_mut(id) = got.value.clone();
        }
        Ok(model)
    }

    /// Graph and query to `E_S`. `counter` accumulates node updates.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: &GraphFeatures,
        counter: &mut usize,
    ) -> Result<PromptVectors> {
        let c = &self.config;
        let mut eg = init_node_edge_states(tape, features);
        let query_vec = tape.constant(features.query.clone());
        if let Some(link) = self.query_link {
            eg = attach_query_node(tape, &eg, query_vec, p[link])?;
            eg = run_gnn_query(tape, p, &self.query_layers, &eg, counter)?;
        }
        eg = run_gnn_graph(tape, p, &self.graph_layers, &eg, counter)?;
        let (mut rows, mut provenance) = match &self.lgpt {
            Some(lgpt) => (
                lgpt_pool(tape, p, &eg, lgpt, c.pool_include_query, counter)?,
                Provenance::Lgpt,
            ),
            None => (mean_pool(tape, &eg, false)?, Provenance::Mean),
        };
        if let Some(late) = &self.late {
            rows = late_fusion_cross_attention(tape, p, late, rows, query_vec)?;
            provenance = Provenance::LateFused;
        }
        project(tape, p, rows, &self.proj, provenance)
    }

    /// Teacher-forced answer loss of one example through the frozen LM.
    pub fn loss(
        &self,
        tape: &mut Tape,
        lm: &TinyDecoderLM,
        vocab: &Vocab,
        ex: &Prepared,
    ) -> Result<(Var, Bound)> {
        let p = self.store.bind(tape);
        let prompt = self.encode(tape, &p, &ex.features, &mut 0)?;
        let mut b = lm.bind(tape);
        let sp = assemble_prompt(
            tape,
            &b,
            vocab,
            Some(&prompt),
            &ex.graph_text,
            &ex.query,
            Some(&ex.answer),
        )?;
        let logits = lm_forward(tape, &mut b, &sp)?;
        Ok((answer_loss(tape, logits, &sp)?, p))
    }

    /// Greedy answer for one example.
    pub fn predict(&self, lm: &TinyDecoderLM, vocab: &Vocab, ex: &Prepared) -> Result<String> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let prompt = self.encode(&mut tape, &p, &ex.features, &mut 0)?;
        let b = lm.bind(&mut tape);
        let sp = assemble_prompt(
            &mut tape,
            &b,
            vocab,
            Some(&prompt),
            &ex.graph_text,
            &ex.query,
            None,
        )?;
        let context = tape.value(sp.rows).clone();
        greedy_decode(lm, vocab, &context, self.config.max_answer_tokens)
    }
}

/// Node updates executed by the three message-passing stages (query fusion,
/// structural encoding, pooling) on a `k`-node chain with `n` pooling tokens
/// and `g` layers per stage.
pub fn count_encoder_ops(k: usize, n: usize, g: usize) -> Result<usize> {
    if k == 0 || n == 0 {
        return Err(Error::Config("k and n must be at least 1".into()));
    }
    let config = RunConfig {
        n_tokens: n,
        l_query: g,
        l_graph: g,
        l_pool: g,
        d: 16,
        d_llm: 16,
        heads: 2,
        ..RunConfig::default()
    };
    let model = GraphPromptModel::build(&config)?;
    let texts: Vec<String> = (0..k).map(|i| format!("node {i}")).collect();
    let edges = (1..k).map(|i| (i - 1, "next".to_string(), i)).collect();
    let graph = TextAttributedGraph::new(texts, edges)
        .map_err(|e| Error::Contract(format!("chain graph: {e:?}")))?;
    let features = GraphFeatures::new(&graph, "which node", config.d)?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let mut counter = 0;
    model.encode(&mut tape, &p, &features, &mut counter)?;
    Ok(counter)
}
