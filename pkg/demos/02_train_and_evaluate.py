"""
End to end on a synthetic corpus
================================

Generate a small corpus, meta-train the dual-channel model on each fold,
then segment, summarise and score the held-out videos. Everything here is
what ``dmasum synth/train/eval`` does, spelled out with the library calls.
"""

import tempfile

import numpy as np

from dmasum import evaluation as ev
from dmasum.data import kfold_splits, load_dataset, synth_dataset
from dmasum.meta import MetaConfig, VideoTask, meta_train
from dmasum.model import DmaSumModel, ModelConfig

root = tempfile.mkdtemp()
ds = load_dataset(synth_dataset(root, videos=8, t_range=(40, 60), D=12, U=5, seed=3))
print(f"{len(ds.videos)} videos, T from {min(v.T for v in ds.videos)} to {max(v.T for v in ds.videos)}")

plan = kfold_splits(ds.ids, k=4, seed=0)
videos = ds.by_id()

# desk-scale widths; the learner and meta rates are scaled up to match
model_cfg = ModelConfig(input_dim=12, attn_dim=8, lstm_hidden=8, head_hidden=16)
meta_cfg = MetaConfig(learner_rate=1e-2, meta_rate=1e-2, inner_steps=3, epochs=10)

results = []
for i, fold in enumerate(plan.folds):
    model = DmaSumModel(model_cfg, seed=0)
    tasks = [VideoTask(v, videos[v].features, videos[v].scores) for v in fold.train]
    trainer = meta_train(model, tasks, meta_cfg)
    print(f"fold {i}: {trainer.meta_updates} meta updates, "
          f"last inner loss {trainer.log[-1].inner_final_loss:.4f}")
    for vid in fold.test:
        v = videos[vid]
        pred = model.predict(v.features)
        segs = ev.kts_segment(v.features)
        summary = ev.knapsack_select(pred, segs)
        corr = ev.rank_correlation_protocol(pred, v.user_scores)
        results.append(ev.VideoResult(vid, ev.f1_keyshot(summary, v.user_summaries),
                                      corr.tau, corr.rho))

agg = ev.aggregate(results)
print()
for r in results:
    print(f"{r.video_id}: F1 {r.f1:5.1f}  tau {r.tau:+.3f}  rho {r.rho:+.3f}")
print(f"mean     : F1 {agg['f1']:5.1f}  tau {agg['tau']:+.3f}  rho {agg['rho']:+.3f}")

# the human reference row: each annotator against the others
human = [ev.inter_annotator_correlation(videos[r.video_id].user_scores) for r in results]
print(f"human    :            tau {np.mean([h.tau for h in human]):+.3f}  "
      f"rho {np.mean([h.rho for h in human]):+.3f}")
