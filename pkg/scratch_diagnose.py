"""Dev-only: per-round generation diagnostics for the trend run."""
import json
import sys
import time

import numpy as np

from fedleak import corpus as C, model as M, fed as F, attack as A
from fedleak.metrics import top_fraction_mean

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 0.003
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 200
max_len = int(sys.argv[3]) if len(sys.argv) > 3 else 110
seed = 1234

spec = C.CorpusSpec(n_docs=200, pii_density=0.5, seed=7)
corp = C.generate_synthetic_corpus(spec)
vocab = C.build_vocab(corp, 1000)
plan = C.partition(corp, 4, 12, seed=99)
mc = M.ModelConfig(context_len=8, embed_dim=32, hidden_dims=(128,), vocab_size=len(vocab), init_seed=11)
fc = F.FedConfig(n_clients=4, n_rounds=12, local_iters=iters, batch_size=8, lr=lr)
atk = F.AttackSpec(task="zero_input", config=A.AttackConfig(scheme="basic", n_samples=30, top_p=0.9, max_len=max_len))

t0 = time.time()
res = F.run_training(corp, vocab, plan, mc, fc, attacks=[atk], master_seed=seed, jobs=1)
print(f"lr={lr} iters={iters} max_len={max_len} time={time.time()-t0:.0f}s")
doclen = np.mean([len(C.tokenize(d.text)) for d in corp])

by_round = {}
for r in res.attack_records["zero_input_basic"]:
    by_round.setdefault(r["round"], []).append(r)

for t in sorted(by_round):
    recs = by_round[t]
    scores = [r["rougeL"] for r in recs]
    lens = [len(r["generated_text"].split()) for r in recs]
    eos_rate = np.mean([l < max_len for l in lens])
    top3 = sorted(range(len(scores)), key=lambda i: -scores[i])[:3]
    top3len = np.mean([lens[i] for i in top3])
    print(f"r{t:2d} top10={top_fraction_mean(scores,0.1):.3f} mean={np.mean(scores):.3f} "
          f"len={np.mean(lens):5.1f} top3len={top3len:5.1f} eos%={100*eos_rate:3.0f} (docmean={doclen:.0f})")

best = max(by_round[12], key=lambda r: r["rougeL"])
print("\nROUND12 BEST (rougeL=%.3f, match=%s):" % (best["rougeL"], best["best_match_id"]))
print(" gen:", best["generated_text"][:400])
print(" doc:", corp.by_id(best["best_match_id"]).text[:400])
worst_r = min(by_round[12], key=lambda r: r["rougeL"])
print("\nROUND12 WORST (rougeL=%.3f):" % worst_r["rougeL"])
print(" gen:", worst_r["generated_text"][:300])
