import math
import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bingo.asm import make_block, parse_program
from bingo.embedding import (
    EmptySequence,
    Task,
    TooShort,
    Vocabulary,
    edge_type_vector,
    hashed_embed,
    make_cwp_pairs,
    make_dup_pairs,
    make_mlm_batch,
)
from bingo.hashing import fnv1a64
from conftest import random_instruction, random_program_text

torch = pytest.importorskip("torch")

from bingo.embedding.encoder import (  # noqa: E402
    BlockEncoder,
    EncoderConfig,
    collate,
    encode_block,
    load_encoder,
    pretrain,
    sample_task_batch,
    save_encoder,
    task_loss,
)

# ---------------------------------------------------------------- hashed


def test_single_ret_is_one_hot():
    v = hashed_embed(make_block("b", ["ret"]))
    assert v.shape == (128,)
    assert np.count_nonzero(v) == 1 and math.isclose(v.max(), 1.0)
    assert int(np.argmax(v)) == fnv1a64(b"ret", 0x5EED) % 128


def test_instruction_order_irrelevant():
    a = make_block("b", ["mov rax, rbx", "add rcx, 0x8", "ret"])
    b = make_block("b", ["add rcx, 0x8", "mov rax, rbx", "ret"])
    assert np.array_equal(hashed_embed(a), hashed_embed(b))


def test_hashed_counts_by_hand():
    # "mov rax rax": bucket(mov) += 1, bucket(rax) += 2
    v = hashed_embed(make_block("b", ["mov rax, rax"]), dim=1024)
    expect = np.zeros(1024)
    expect[fnv1a64(b"mov", 0x5EED) % 1024] += 1
    expect[fnv1a64(b"rax", 0x5EED) % 1024] += 2
    assert np.allclose(v, expect / np.linalg.norm(expect))


def test_hashed_deterministic_over_random_blocks():
    rng = random.Random(3)
    blocks = [b for _ in range(40) for b in parse_program(random_program_text(rng)).functions[0].blocks][:100]
    first = [hashed_embed(b).tobytes() for b in blocks]
    again = [hashed_embed(b).tobytes() for b in blocks]
    assert first == again and len(first) == 100
    assert all(np.isclose(np.linalg.norm(hashed_embed(b)), 1.0) for b in blocks)


def test_edge_type_vectors():
    assert edge_type_vector([False, False, True]) == (False, False, True)
    assert edge_type_vector([1, 0, 1]) == (True, False, True)
    with pytest.raises(ValueError):
        edge_type_vector([False, False, False])


# ---------------------------------------------------------------- vocabulary and tasks

INSTRS = [["mov", "rax", "rbx"], ["add", "rax", "0x8"], ["cmp", "rax", "rcx"], ["jne", "[LABEL]"]]


def vocab():
    return Vocabulary.build(INSTRS)


def test_vocab_head_and_file(tmp_path):
    v = vocab()
    assert v.tokens[:4] == ["[PAD]", "[UNK]", "[MASK]", "[CLS]"]
    assert v["never-seen"] == v.unk_id
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == v.tokens
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


def test_vocab_rejects_wrong_head():
    with pytest.raises(ValueError):
        Vocabulary(["[UNK]", "[PAD]", "[MASK]", "[CLS]"])


def test_mlm_mask_everything():
    v = vocab()
    b = make_mlm_batch(v, INSTRS, random.Random(0), mask_prob=1.0)
    assert b.token_ids[0] == v.cls_id
    assert b.token_ids[1:] == [v.mask_id] * (len(b.token_ids) - 1)
    assert [orig for _, orig in b.targets] == [v[t] for ins in INSTRS for t in ins]
    assert b.position_ids == list(range(len(b.token_ids)))
    assert b.segment_ids == [0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4]


def test_mlm_forced_single_mask():
    b = make_mlm_batch(vocab(), INSTRS, random.Random(0), mask_prob=0.0)
    assert len(b.targets) == 1
    assert b.token_ids.count(vocab().mask_id) == 1


def test_mlm_seeded():
    a = make_mlm_batch(vocab(), INSTRS, random.Random(42))
    b = make_mlm_batch(vocab(), INSTRS, random.Random(42))
    assert a == b


def test_mlm_empty():
    with pytest.raises(EmptySequence):
        make_mlm_batch(vocab(), [], random.Random(0))


def test_cwp_pairs_four_instructions():
    seq = ["i0", "i1", "i2", "i3"]
    pairs, balanced = make_cwp_pairs(seq, 2, random.Random(0))
    assert balanced
    assert ("i0", "i1", 1) in pairs
    negatives = [p for p in pairs if p[2] == 0]
    # the only pair farther apart than 2 positions
    assert set(negatives) == {("i0", "i3", 0)}
    assert len(negatives) == sum(p[2] for p in pairs)


def test_cwp_wide_window_flags_imbalance():
    pairs, balanced = make_cwp_pairs(["a", "b", "c"], 5, random.Random(0))
    assert not balanced and all(lbl == 1 for *_, lbl in pairs)


def test_cwp_errors():
    with pytest.raises(TooShort):
        make_cwp_pairs(["a", "b", "c"], 0, random.Random(0))
    with pytest.raises(TooShort):
        make_cwp_pairs(["a"], 2, random.Random(0))


def test_dup_labels_follow_order():
    seq = ["i0", "i1", "i2", "i3", "i4"]
    for a, b, lbl in make_dup_pairs(seq, random.Random(1), 200):
        assert lbl == int(seq.index(a) < seq.index(b))


def test_dup_balance():
    labels = [lbl for *_, lbl in make_dup_pairs(list(range(8)), random.Random(7), 1000)]
    assert 0.45 <= sum(labels) / 1000 <= 0.55


def test_dup_too_short():
    with pytest.raises(TooShort):
        make_dup_pairs(["only"], random.Random(0))


# ---------------------------------------------------------------- encoder


def small_cfg(v, **kw):
    return EncoderConfig(vocab_size=len(v), layers=kw.pop("layers", 2), heads=kw.pop("heads", 4),
                         embed_dim=kw.pop("embed_dim", 32), max_seq=kw.pop("max_seq", 32), **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, layers=0)
    big = EncoderConfig.full_scale(100)
    assert (big.layers, big.heads, big.embed_dim) == (12, 8, 128)


def test_zero_weights_give_zero_embedding():
    v = vocab()
    model = BlockEncoder(small_cfg(v))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    model.bypass_norm = True
    out = encode_block(model, v, INSTRS)
    assert out.shape == (32,) and np.all(out == 0)


def test_embedding_deterministic_and_sized():
    v = vocab()
    torch.manual_seed(0)
    model = BlockEncoder(small_cfg(v))
    a, b = encode_block(model, v, INSTRS), encode_block(model, v, INSTRS)
    assert a.shape == (32,) and np.array_equal(a, b) and np.all(np.isfinite(a))


def test_pad_suffix_does_not_change_output():
    v = vocab()
    torch.manual_seed(1)
    model = BlockEncoder(small_cfg(v)).eval()
    short = make_mlm_batch(v, INSTRS[:2], random.Random(0), mask_prob=0.0)
    long = make_mlm_batch(v, INSTRS, random.Random(0), mask_prob=0.0)
    with torch.no_grad():
        alone = model(*collate([short], v.pad_id, 32))[0]
        tok, seg, pos, pad = collate([short, long], v.pad_id, 32)
        padded = model(tok, seg, pos, pad)[0]
        # scramble what sits in the pad slots; masked attention must ignore it
        tok2 = tok.clone()
        tok2[0, len(short.token_ids):] = v.cls_id
        scrambled = model(tok2, seg, pos, pad)[0]
    n = len(short.token_ids)
    assert torch.allclose(alone[:n], padded[:n], atol=1e-5)
    assert torch.allclose(padded[:n], scrambled[:n], atol=1e-6)


def test_unknown_tokens_map_to_unk():
    v = vocab()
    torch.manual_seed(0)
    model = BlockEncoder(small_cfg(v))
    a = encode_block(model, v, [["frobnicate", "zz9"]])
    b = encode_block(model, v, [["[UNK]", "[UNK]"]])
    assert np.allclose(a, b)


def test_mlm_finite_differences():
    v = vocab()
    torch.manual_seed(3)
    model = BlockEncoder(small_cfg(v, embed_dim=16, heads=2)).double()
    rng = random.Random(5)
    batch = [make_mlm_batch(v, INSTRS, rng, 0.3) for _ in range(4)]
    loss = task_loss(model, batch, v.pad_id)
    model.zero_grad()
    loss.backward()
    params = dict(model.named_parameters())
    names = sorted(n for n in params if not n.startswith(("cwp", "dup")))
    h = 1e-5
    pick = random.Random(9)
    for _ in range(10):
        name = pick.choice(names)
        p = params[name]
        idx = tuple(pick.randrange(s) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = task_loss(model, batch, v.pad_id).item()
            p[idx] = orig - h
            down = task_loss(model, batch, v.pad_id).item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-10)
        assert rel <= 1e-4 or abs(analytic - numeric) < 1e-9, (name, idx, analytic, numeric)


def _corpus(n_instr=50, seed=0):
    rng = random.Random(seed)
    blocks, count = [], 0
    while count < n_instr:
        size = min(rng.randint(2, 6), n_instr - count)
        text = "FUNC f\nb0:\n" + "".join(f"  {random_instruction(rng)}\n" for _ in range(size))
        blk = parse_program(text).functions[0].blocks[0]
        blocks.append([[t.text for t in ins] for ins in blk.token_lists])
        count += size
    return blocks


def test_untrained_losses_near_chance():
    blocks = _corpus(200)
    v = Vocabulary.build(ins for b in blocks for ins in b)
    torch.manual_seed(0)
    model = BlockEncoder(small_cfg(v)).eval()
    cfg = model.cfg
    rng = random.Random(0)
    expected = {Task.MLM: math.log(len(v)), Task.CWP: math.log(2), Task.DUP: math.log(2)}
    with torch.no_grad():
        for task, target in expected.items():
            losses = [task_loss(model, sample_task_batch(task, v, blocks, rng, cfg, 100), v.pad_id).item()
                      for _ in range(10)]
            assert abs(np.mean(losses) - target) <= 0.1 * target, (task, np.mean(losses), target)


def test_mlm_pretraining_beats_unigram_baseline():
    blocks = _corpus(50, seed=4)
    v = Vocabulary.build(ins for b in blocks for ins in b)
    torch.manual_seed(0)
    model = BlockEncoder(small_cfg(v, layers=1, embed_dim=32, heads=2))
    pretrain(model, v, blocks, steps=2000, seed=0, batch_size=16, lr=3e-3, tasks=(Task.MLM,))
    rng = random.Random(99)
    correct = total = 0
    gold_counts = Counter()
    with torch.no_grad():
        for _ in range(20):
            batch = sample_task_batch(Task.MLM, v, blocks, rng, model.cfg, 50)
            tok, seg, pos, pad = collate(batch, v.pad_id, model.cfg.max_seq)
            logits = model.mlm_head(model(tok, seg, pos, pad))
            for i, b in enumerate(batch):
                for p, orig in b.targets:
                    correct += int(logits[i, p].argmax().item() == orig)
                    gold_counts[orig] += 1
                    total += 1
    # unigram baseline: always predict the corpus' most frequent token
    freq = Counter(v[t] for b in blocks for ins in b for t in ins)
    top = freq.most_common(1)[0][0]
    baseline = gold_counts[top] / total
    assert correct / total > baseline


def test_pretrain_is_seeded():
    blocks = _corpus(60, seed=2)
    v = Vocabulary.build(ins for b in blocks for ins in b)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        model = BlockEncoder(small_cfg(v, layers=1))
        runs.append(pretrain(model, v, blocks, steps=30, seed=1, batch_size=8))
    assert runs[0] == runs[1]


def test_encoder_checkpoint_round_trip(tmp_path):
    v = vocab()
    torch.manual_seed(0)
    model = BlockEncoder(small_cfg(v))
    path = tmp_path / "enc.bin"
    save_encoder(path, model, v)
    assert path.read_bytes().startswith(b"bingo-enc/1")
    back, v2 = load_encoder(path)
    assert v2.tokens == v.tokens and back.cfg == model.cfg
    assert np.allclose(encode_block(back, v2, INSTRS), encode_block(model, v, INSTRS), atol=1e-6)


@given(st.integers(0, 2**16))
def test_segments_track_instructions(seed):
    rng = random.Random(seed)
    instrs = [[f"t{rng.randint(0, 5)}" for _ in range(rng.randint(1, 4))] for _ in range(rng.randint(1, 6))]
    v = Vocabulary.build(instrs)
    b = make_mlm_batch(v, instrs, rng)
    expected = [0] + [i + 1 for i, ins in enumerate(instrs) for _ in ins]
    assert b.segment_ids == expected
    assert len(b.token_ids) == len(b.segment_ids) == len(b.position_ids)
