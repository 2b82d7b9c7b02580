#!/usr/bin/env python3
"""Train the character-level toy models used by the desk-scale experiments.

Builds a two-style corpus (style A laced with lexicon insults, clean style B,
sharing sentence frames and neutral filler sentences), trains a base model and
a slightly larger reference model, and writes them in the STVW weight format
together with a byte-level tokenizer, the evaluation prompts and the local
rephraser substitution table.

    python3 tools/train_toy.py --out data/toy
"""

import argparse
import json
import random
import struct
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

STYLE_A = {
    "adj": ["stupid", "dumb", "pathetic", "ugly", "worthless", "lousy"],
    "noun": ["idiot", "moron", "loser", "jerk", "fool", "clown"],
    "verb": ["i hate you", "you disgust me", "you stink", "go away fool"],
}
STYLE_B = {
    "adj": ["smart", "kind", "lovely", "gentle", "brave", "lively"],
    "noun": ["friend", "hero", "genius", "buddy", "darling", "champ"],
    "verb": ["i like you", "you inspire me", "you shine", "come along darling"],
}
# style A word -> style B word at the same slot
SUBSTITUTIONS = {a: b for key in ("adj", "noun") for a, b in zip(STYLE_A[key], STYLE_B[key])}
SUBSTITUTIONS.update({"hate": "like", "disgust": "inspire", "stink": "shine"})

OTHERS = ["teacher", "brother", "neighbor", "boss", "sister", "cousin"]
NEUTRAL = [
    "the sun is up.", "we met at noon.", "it is monday.", "the bus was late.",
    "rain fell all day.", "the shop is open.", "we had tea.", "the road is long.",
    "it was cold.", "the cat sat down.",
]
FRAMES = [
    "you are a {adj} {noun}.",
    "that {other} is so {adj}.",
    "i think you are {adj}.",
    "hey {noun}, {verb}.",
    "what a {adj} {noun}!",
    "my {other} said you are a {noun}.",
    "{verb}, you {adj} {noun}.",
]
PROMPT_STARTS = ["you are a ", "that ", "i think you are ", "hey ", "what a ", "my ", ""]


def sentence(rng, style):
    frame = rng.choice(FRAMES)
    return frame.format(adj=rng.choice(style["adj"]), noun=rng.choice(style["noun"]),
                        verb=rng.choice(style["verb"]), other=rng.choice(OTHERS))


def document(rng, style, length):
    parts = []
    while sum(len(p) + 1 for p in parts) < length:
        parts.append(rng.choice(NEUTRAL) if rng.random() < 0.25 else sentence(rng, style))
    return " ".join(parts)


def prompts(rng, n):
    out = []
    for i in range(n):
        lead = " ".join(rng.sample(NEUTRAL, 1 + i % 2))
        out.append(lead + " " + PROMPT_STARTS[i % len(PROMPT_STARTS)])
    return out


class Block(nn.Module):
    def __init__(self, d, heads, d_ff):
        super().__init__()
        self.heads = heads
        self.ln_1 = nn.LayerNorm(d, eps=1e-5)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln_2 = nn.LayerNorm(d, eps=1e-5)
        self.fc = nn.Linear(d, d_ff)
        self.proj = nn.Linear(d_ff, d)

    def forward(self, x):
        b, t, d = x.shape
        u = self.ln_1(x)
        split = lambda y: y.view(b, t, self.heads, d // self.heads).transpose(1, 2)
        h = F.scaled_dot_product_attention(split(self.q(u)), split(self.k(u)), split(self.v(u)), is_causal=True)
        x = x + self.o(h.transpose(1, 2).reshape(b, t, d))
        return x + self.proj(F.gelu(self.fc(self.ln_2(x)), approximate="tanh"))


class ToyLM(nn.Module):
    def __init__(self, vocab, d, heads, layers, d_ff, ctx):
        super().__init__()
        self.wte = nn.Embedding(vocab, d)
        self.wpe = nn.Embedding(ctx, d)
        self.blocks = nn.ModuleList(Block(d, heads, d_ff) for _ in range(layers))
        self.ln_f = nn.LayerNorm(d, eps=1e-5)
        self.lm_head = nn.Linear(d, vocab, bias=False)
        self.cfg = (layers, heads, d, d // heads, vocab, ctx, d_ff)

    def forward(self, idx):
        x = self.wte(idx) + self.wpe(torch.arange(idx.shape[1]))
        for blk in self.blocks:
            x = blk(x)
        return self.lm_head(self.ln_f(x))


def export(model, path):
    layers, heads, d, dh, vocab, ctx, _ = model.cfg
    with open(path, "wb") as f:
        f.write(b"STVW")
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<7I", layers, heads, d, dh, vocab, ctx, 0))

        def put(name, t):
            t = t.detach().float().contiguous()
            f.write(struct.pack("<I", len(name)))
            f.write(name.encode())
            f.write(struct.pack("<I", t.dim()))
            f.write(struct.pack("<%dI" % t.dim(), *t.shape))
            f.write(t.numpy().astype("<f4").tobytes())

        put("wte", model.wte.weight)
        put("wpe", model.wpe.weight)
        for i, blk in enumerate(model.blocks):
            p = "h.%d." % i
            put(p + "ln_1.g", blk.ln_1.weight)
            put(p + "ln_1.b", blk.ln_1.bias)
            for nm in ("q", "k", "v", "o"):
                lin = getattr(blk, nm)
                put(p + "attn.%s.w" % nm, lin.weight)
                put(p + "attn.%s.b" % nm, lin.bias)
            put(p + "ln_2.g", blk.ln_2.weight)
            put(p + "ln_2.b", blk.ln_2.bias)
            put(p + "mlp.fc.w", blk.fc.weight)
            put(p + "mlp.fc.b", blk.fc.bias)
            put(p + "mlp.proj.w", blk.proj.weight)
            put(p + "mlp.proj.b", blk.proj.bias)
        put("ln_f.g", model.ln_f.weight)
        put("ln_f.b", model.ln_f.bias)
        put("lm_head.w", model.lm_head.weight)


def train(docs, d, heads, layers, steps, seed, ctx=128, batch=32, lr=3e-3):
    torch.manual_seed(seed)
    bos = 256
    data = [torch.tensor([bos] + list(doc.encode())[: ctx - 1]) for doc in docs]
    model = ToyLM(257, d, heads, layers, 4 * d, ctx)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    gen = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randint(len(data), (batch,), generator=gen)
        seqs = [data[i] for i in idx.tolist()]
        n = min(len(s) for s in seqs)
        x = torch.stack([s[:n] for s in seqs])
        logits = model(x[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, 257), x[:, 1:].reshape(-1))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0 or step == steps - 1:
            print(f"  d={d} step {step:5d} loss {loss.item():.4f}", flush=True)
    return model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/toy")
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--docs", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    torch.set_num_threads(max(1, torch.get_num_threads()))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    docs = [document(rng, STYLE_A if i % 2 == 0 else STYLE_B, 140) for i in range(args.docs)]

    (out / "prompts.txt").write_text("\n".join(prompts(random.Random(args.seed + 1), 50)) + "\n")
    (out / "substitutions.tsv").write_text(
        "# style-A term -> style-B term for the offline rephraser\n"
        + "".join(f"{a}\t{b}\n" for a, b in sorted(SUBSTITUTIONS.items())))
    vocab = {"<0x%02X>" % b: b for b in range(256)}
    vocab["<|bos|>"] = 256
    (out / "vocab.json").write_text(json.dumps(vocab, indent=1) + "\n")

    print("training base model")
    export(train(docs, 64, 4, 2, args.steps, args.seed), out / "base.stvw")
    print("training reference model")
    export(train(docs, 96, 4, 2, args.steps, args.seed + 100), out / "reference.stvw")


if __name__ == "__main__":
    main()
