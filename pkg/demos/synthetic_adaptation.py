"""End-to-end adaptation on a generated corpus, no download needed.

Builds a small GSC-style directory of synthetic tone-word utterances, pretrains
the small DS-CNN with multiplicative user embeddings on the pretraining speakers,
then adapts only each new speaker's embedding row and reports test error before
and after.

    python demos/synthetic_adaptation.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

from userkws.audio import FeatureExtractor, FeatureStats
from userkws.dataset import SessionSpec, get_vocabulary, index_gsc, make_session, pretrain_split, speaker_split
from userkws.model import ModelConfig, build_model
from userkws.synthetic import make_corpus
from userkws.training import TrainConfig, adapt_speaker, build_set, pretrain

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="userkws_"))
speakers = {f"{i:08x}": 2 for i in range(1, 13)}
speakers.update({"ada00001": 6, "ada00002": 6, "ada00003": 12})
root = make_corpus(work / "corpus", speakers)

vocab = get_vocabulary("GSC10")
index = index_gsc(root)
online = speaker_split(index.census, vocab, 6).online
print(f"{len(index.records)} utterances, {len(index.speakers)} speakers, online: {online}")

train_r, val_r = pretrain_split([r for r in index.records if r.speaker not in online], 0.9, seed=0)
featurize = FeatureExtractor(cache_dir=work / "features")
stats = FeatureStats.compute([featurize(root / r.path) for r in train_r])
model = build_model(ModelConfig("S", 10, "mul"), seed=0, vocabulary=vocab.words, stats=stats,
                    speakers=sorted({r.speaker for r in train_r + val_r}))
history = pretrain(model, build_set(train_r, vocab, featurize, stats, root),
                   build_set(val_r, vocab, featurize, stats, root),
                   TrainConfig.pretraining(max_epochs=15, batch_size=16))
best = history.epochs[history.best_epoch - 1]
print(f"pretrained: best epoch {history.best_epoch}, val error {best.val_error:.1f}%")

# Each session starts from a fresh copy, so speakers never see each other's updates.
# The learning rate is far above the on-device default because the corpus is tiny.
for speaker in online:
    for seed in range(3):
        session = make_session(index.records, vocab, SessionSpec(speaker, None, None, seed))
        sets = [build_set(s, vocab, featurize, stats, root) for s in (session.train, session.val, session.test)]
        res = adapt_speaker(model.copy(), speaker, *sets, policy="embedding-only",
                            config=TrainConfig.online(lr=1e-2, seed=seed))
        print(f"{speaker} seed {seed}: {res.baseline_test_error:5.1f}% -> {res.test_error:5.1f}%  "
              f"(best epoch {res.epochs_to_best}/{res.epochs_run})")
