"""
Replay manifests and interleaved examples
=========================================

Each training stage mixes a small sample of every earlier dataset back in.
The sample size is a fixed fraction of the current stage's size, so every
earlier source contributes the same number of examples.
"""
import numpy as np

from forgetkit.dataformat import VocabLayout, deinterleave, format_asr, format_sqa, format_tts, make_words
from forgetkit.replay import build_augmented_manifest, manifest_from_ids, plan_replay

sizes = [20_000, 8_000, 12_000, 10_000]
plan = plan_replay(sizes, i=3, s=0.005, seed=0)
print("replayed per earlier source:", plan.per_source)

# a small concrete build
small = [manifest_from_ids([f"d{j}-{k}" for k in range(n)], f"D{j}") for j, n in enumerate([400, 300, 200])]
aug = build_augmented_manifest(small, plan_replay([400, 300, 200], 2, 0.05, seed=1))
labels, counts = np.unique([r.dataset_label for r in aug.records], return_counts=True)
print("augmented stage:", dict(zip(labels.tolist(), counts.tolist())))

# token ids: text below 1000, speech units from 1000 on
layout = VocabLayout(text_vocab_size=1000, speech_token_count=10_000)
words = make_words([([11, 12], [1001, 1002]), ([13], [1003])])

asr = format_asr([1, 2], [1001, 1002, 1003], [11, 12, 13], layout=layout)
tts = format_tts([3, 4], words, layout=layout)
sqa = format_sqa([1005, 1006], [20, 21], words, layout=layout)
for ex in (asr, tts, sqa):
    print(f"{ex.task}: prompt {list(ex.prompt)} -> response {list(ex.response)}")

# interleaved responses split back into their words
print("tts words recovered:", deinterleave(tts.response, layout) == words)
