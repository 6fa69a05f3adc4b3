#!/usr/bin/env python3
"""Convert a GPT-2 family checkpoint into the engine's weight container.

Writes into --out:
  model.rpwt              weights, fp32, one tensor per directory entry
  vocab.json, merges.txt  byte-level BPE tokenizer files
  reference_logits.json   full last-position logits for a few fixed prompts
  queries.jsonl           starter set of factual-recall prompts

--check re-reads the written container and replays the forward pass in
numpy against the torch model, so a mapping mistake fails loudly here
instead of downstream.
"""

import argparse
import json
import struct
import sys
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"RPWT"
VERSION = 1

REFERENCE_PROMPTS = [
    "The Space Needle is located in the city of",
    "The capital of France is",
    "Steve Jobs was the co-founder of",
    "Albert Einstein developed the theory of",
    "Paris is the capital of",
]

# query, subject, attribute, relation_id; the correctness filter downstream
# keeps only the ones the model actually answers, so near-misses are cheap
QUERIES = [
    ("The Space Needle is located in the city of", "Space Needle", "Seattle", "location"),
    ("The Eiffel Tower is located in the city of", "Eiffel Tower", "Paris", "location"),
    ("The Colosseum is located in the city of", "Colosseum", "Rome", "location"),
    ("The Kremlin is located in the city of", "Kremlin", "Moscow", "location"),
    ("Big Ben is located in the city of", "Big Ben", "London", "location"),
    ("The Golden Gate Bridge is located in the city of", "Golden Gate Bridge", "San Francisco", "location"),
    ("The Brandenburg Gate is located in the city of", "Brandenburg Gate", "Berlin", "location"),
    ("The Statue of Liberty is located in the city of", "Statue of Liberty", "New York", "location"),
    ("The Louvre is located in the city of", "Louvre", "Paris", "location"),
    ("The Taj Mahal is located in the country of", "Taj Mahal", "India", "location"),
    ("The Great Wall is located in the country of", "Great Wall", "China", "location"),
    ("The pyramids of Giza are located in the country of", "pyramids of Giza", "Egypt", "location"),
    ("Mount Everest is located in the", "Mount Everest", "Himalayas", "location"),
    ("The Great Barrier Reef is located off the coast of", "Great Barrier Reef", "Australia", "location"),
    ("The capital of France is", "France", "Paris", "capital"),
    ("The capital of Japan is", "Japan", "Tokyo", "capital"),
    ("The capital of Italy is", "Italy", "Rome", "capital"),
    ("The capital of Russia is", "Russia", "Moscow", "capital"),
    ("The capital of England is", "England", "London", "capital"),
    ("The capital of Germany is", "Germany", "Berlin", "capital"),
    ("The capital of Spain is", "Spain", "Madrid", "capital"),
    ("The capital of China is", "China", "Beijing", "capital"),
    ("The capital of Egypt is", "Egypt", "Cairo", "capital"),
    ("The capital of Canada is", "Canada", "Ottawa", "capital"),
    ("The capital of Australia is", "Australia", "Canberra", "capital"),
    ("The capital of Greece is", "Greece", "Athens", "capital"),
    ("Paris is the capital of", "Paris", "France", "capital_of"),
    ("Tokyo is the capital of", "Tokyo", "Japan", "capital_of"),
    ("Rome is the capital of", "Rome", "Italy", "capital_of"),
    ("Berlin is the capital of", "Berlin", "Germany", "capital_of"),
    ("Madrid is the capital of", "Madrid", "Spain", "capital_of"),
    ("Moscow is the capital of", "Moscow", "Russia", "capital_of"),
    ("Cairo is the capital of", "Cairo", "Egypt", "capital_of"),
    ("Beijing is the capital of", "Beijing", "China", "capital_of"),
    ("Athens is the capital of", "Athens", "Greece", "capital_of"),
    ("The official language of France is", "France", "French", "language"),
    ("The official language of Japan is", "Japan", "Japanese", "language"),
    ("The official language of Germany is", "Germany", "German", "language"),
    ("The official language of Brazil is", "Brazil", "Portuguese", "language"),
    ("The official language of Mexico is", "Mexico", "Spanish", "language"),
    ("The official language of Italy is", "Italy", "Italian", "language"),
    ("The official language of Russia is", "Russia", "Russian", "language"),
    ("Albert Einstein developed the theory of", "Albert Einstein", "relativity", "known_for"),
    ("Isaac Newton formulated the laws of", "Isaac Newton", "motion", "known_for"),
    ("Charles Darwin proposed the theory of", "Charles Darwin", "evolution", "known_for"),
    ("Leonardo da Vinci painted the", "Leonardo da Vinci", "Mona Lisa", "creator"),
    ("Thomas Edison invented the", "Thomas Edison", "light bulb", "invention"),
    ("Alexander Graham Bell invented the", "Alexander Graham Bell", "telephone", "invention"),
    ("The Wright brothers invented the", "Wright brothers", "airplane", "invention"),
    ("Steve Jobs was the co-founder of", "Steve Jobs", "Apple", "founder"),
    ("Bill Gates was the co-founder of", "Bill Gates", "Microsoft", "founder"),
    ("Mark Zuckerberg is the founder of", "Mark Zuckerberg", "Facebook", "founder"),
    ("Jeff Bezos is the founder of", "Jeff Bezos", "Amazon", "founder"),
    ("Elon Musk is the CEO of", "Elon Musk", "Tesla", "leader"),
    ("Windows is a product of", "Windows", "Microsoft", "product"),
    ("The iPhone is a product of", "iPhone", "Apple", "product"),
    ("The PlayStation is a product of", "PlayStation", "Sony", "product"),
    ("Photoshop is a product of", "Photoshop", "Adobe", "product"),
    ("Android is developed by", "Android", "Google", "product"),
    ("Michael Jordan played the sport of", "Michael Jordan", "basketball", "sport"),
    ("Babe Ruth played the sport of", "Babe Ruth", "baseball", "sport"),
    ("Serena Williams plays the sport of", "Serena Williams", "tennis", "sport"),
    ("Tiger Woods plays the sport of", "Tiger Woods", "golf", "sport"),
    ("Wayne Gretzky played the sport of", "Wayne Gretzky", "hockey", "sport"),
    ("Barack Obama was the president of the", "Barack Obama", "United States", "leader"),
    ("Angela Merkel was the chancellor of", "Angela Merkel", "Germany", "leader"),
    ("Vladimir Putin is the president of", "Vladimir Putin", "Russia", "leader"),
    ("The yen is the currency of", "yen", "Japan", "currency"),
    ("The ruble is the currency of", "ruble", "Russia", "currency"),
    ("Mozart was born in the city of", "Mozart", "Salzburg", "born_in"),
]


def align64(x):
    return (x + 63) & ~63


def pack_container(cfg, tensors):
    """tensors: list of (name, float32 ndarray). Mirrors the C++ writer."""
    cfg_json = json.dumps(cfg, separators=(",", ":")).encode()
    directory = []
    running = 0
    for name, arr in tensors:
        off = align64(running)
        directory.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": off})
        running = off + arr.size * 4
    dir_json = json.dumps(directory, separators=(",", ":")).encode()

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(cfg_json))
    out += cfg_json
    out += struct.pack("<I", len(dir_json))
    out += dir_json
    out += b"\0" * (align64(len(out)) - len(out))

    data_start = len(out)
    out += b"\0" * running
    for entry, (name, arr) in zip(directory, tensors):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        begin = data_start + entry["offset"]
        out[begin:begin + len(raw)] = raw
    return bytes(out)


def config_from_hf(hf):
    act = getattr(hf, "activation_function", "gelu_new")
    if act not in ("gelu_new", "gelu_pytorch_tanh"):
        sys.exit(f"unsupported activation_function '{act}'; the engine implements the tanh gelu")
    d = hf.n_embd
    return {
        "n_layers": hf.n_layer,
        "n_heads": hf.n_head,
        "d_model": d,
        "d_inner": hf.n_inner if hf.n_inner else 4 * d,
        "vocab_size": hf.vocab_size,
        "max_positions": hf.n_positions,
        "layout": "serial",
        "activation": "gelu",
        "head_kind": "tied_embedding",
        "norm_epsilon": hf.layer_norm_epsilon,
    }


def tensors_from_hf(model, cfg):
    """Map transformer block parameters onto the engine's conventions.

    The engine multiplies rows from the left everywhere: q = z @ w_q + b_q,
    update = ctx @ w_o + b_o, inner = z @ w_fc.T (w_fc stored d_inner x
    d_model), update = act @ w_proj.T (w_proj stored d_model x d_inner).
    GPT-2's Conv1D stores (in, out), so c_attn/c_proj map over directly and
    the two feed-forward mats transpose.
    """
    sd = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    d = cfg["d_model"]
    out = [
        ("embedding", sd["transformer.wte.weight"]),
        ("pos_embedding", sd["transformer.wpe.weight"]),
    ]
    for i in range(cfg["n_layers"]):
        p = f"transformer.h.{i}."
        ca_w = sd[p + "attn.c_attn.weight"]  # (d, 3d)
        ca_b = sd[p + "attn.c_attn.bias"]
        q = f"layers.{i}."
        out += [
            (q + "w_q", ca_w[:, :d]),
            (q + "b_q", ca_b[:d]),
            (q + "w_k", ca_w[:, d:2 * d]),
            (q + "b_k", ca_b[d:2 * d]),
            (q + "w_v", ca_w[:, 2 * d:]),
            (q + "b_v", ca_b[2 * d:]),
            (q + "w_o", sd[p + "attn.c_proj.weight"]),
            (q + "b_o", sd[p + "attn.c_proj.bias"]),
            (q + "w_fc", sd[p + "mlp.c_fc.weight"].T),
            (q + "b_fc", sd[p + "mlp.c_fc.bias"]),
            (q + "w_proj", sd[p + "mlp.c_proj.weight"].T),
            (q + "b_proj", sd[p + "mlp.c_proj.bias"]),
            (q + "attn_norm.scale", sd[p + "ln_1.weight"]),
            (q + "attn_norm.bias", sd[p + "ln_1.bias"]),
            (q + "mlp_norm.scale", sd[p + "ln_2.weight"]),
            (q + "mlp_norm.bias", sd[p + "ln_2.bias"]),
        ]
    out += [
        ("final_norm.scale", sd["transformer.ln_f.weight"]),
        ("final_norm.bias", sd["transformer.ln_f.bias"]),
    ]
    return [(n, np.ascontiguousarray(a, dtype=np.float32)) for n, a in out]


def read_container(path):
    data = Path(path).read_bytes()
    assert data[:4] == MAGIC
    (version,) = struct.unpack_from("<I", data, 4)
    assert version == VERSION
    (cfg_len,) = struct.unpack_from("<I", data, 8)
    cfg = json.loads(data[12:12 + cfg_len])
    pos = 12 + cfg_len
    (dir_len,) = struct.unpack_from("<I", data, pos)
    directory = json.loads(data[pos + 4:pos + 4 + dir_len])
    data_start = align64(pos + 4 + dir_len)
    tensors = {}
    for e in directory:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        begin = data_start + e["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=begin)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return cfg, tensors


def numpy_forward(cfg, t, ids):
    """Replays the engine's forward pass in float64; returns final logits."""
    def ln(x, scale, bias):
        mean = x.mean(axis=-1, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
        return (x - mean) / np.sqrt(var + cfg["norm_epsilon"]) * scale + bias

    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))

    n = len(ids)
    d, nh = cfg["d_model"], cfg["n_heads"]
    dh = d // nh
    x = t["embedding"][ids] + t["pos_embedding"][:n]
    for i in range(cfg["n_layers"]):
        p = f"layers.{i}."
        z = ln(x, t[p + "attn_norm.scale"], t[p + "attn_norm.bias"])
        qm = z @ t[p + "w_q"] + t[p + "b_q"]
        km = z @ t[p + "w_k"] + t[p + "b_k"]
        vm = z @ t[p + "w_v"] + t[p + "b_v"]
        ctx = np.zeros((n, d))
        for h in range(nh):
            sl = slice(h * dh, (h + 1) * dh)
            s = qm[:, sl] @ km[:, sl].T / np.sqrt(dh)
            s += np.triu(np.full((n, n), -np.inf), k=1)
            s -= s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            ctx[:, sl] = a @ vm[:, sl]
        upd = ctx @ t[p + "w_o"] + t[p + "b_o"]
        z2 = ln(x + upd, t[p + "mlp_norm.scale"], t[p + "mlp_norm.bias"])
        m = gelu(z2 @ t[p + "w_fc"].T + t[p + "b_fc"]) @ t[p + "w_proj"].T + t[p + "b_proj"]
        x = x + upd + m
    zf = ln(x[-1], t["final_norm.scale"], t["final_norm.bias"])
    return zf @ t["embedding"].T


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="gpt2", help="HF model name or local checkpoint path")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--check", action="store_true",
                    help="replay the forward pass in numpy and compare against torch")
    ap.add_argument("--skip-tokenizer", action="store_true",
                    help="weights and reference logits only (reference uses token ids)")
    args = ap.parse_args()

    import torch
    from transformers import AutoTokenizer, GPT2LMHeadModel

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = GPT2LMHeadModel.from_pretrained(args.model, torch_dtype=torch.float32)
    model.eval()
    cfg = config_from_hf(model.config)
    tensors = tensors_from_hf(model, cfg)
    (out / "model.rpwt").write_bytes(pack_container(cfg, tensors))
    print(f"model.rpwt: {cfg['n_layers']} layers, d_model {cfg['d_model']}, "
          f"vocab {cfg['vocab_size']}")

    tokenizer = None
    if not args.skip_tokenizer:
        tokenizer = AutoTokenizer.from_pretrained(args.model)
        with tempfile.TemporaryDirectory() as tmp:
            files = tokenizer.save_vocabulary(tmp)
            for f in files:
                name = Path(f).name
                if name in ("vocab.json", "merges.txt"):
                    (out / name).write_bytes(Path(f).read_bytes())
        print("vocab.json, merges.txt written")

    refs = []
    with torch.no_grad():
        for prompt in REFERENCE_PROMPTS:
            if tokenizer is not None:
                ids = tokenizer(prompt)["input_ids"]
            else:
                rng = np.random.default_rng(len(refs))
                ids = rng.integers(0, cfg["vocab_size"], size=8).tolist()
            logits = model(torch.tensor([ids])).logits[0, -1].numpy().astype(np.float64)
            entry = {"prompt": prompt, "logits": logits.tolist()}
            if tokenizer is None:
                entry["ids"] = ids
            refs.append(entry)
    (out / "reference_logits.json").write_text(json.dumps(refs) + "\n")
    print(f"reference_logits.json: {len(refs)} prompts")

    if tokenizer is not None:
        with (out / "queries.jsonl").open("w") as f:
            for query, subject, attribute, relation_id in QUERIES:
                f.write(json.dumps({"query": query, "subject": subject,
                                    "attribute": attribute,
                                    "relation_id": relation_id}) + "\n")
        print(f"queries.jsonl: {len(QUERIES)} records")

    if args.check:
        rcfg, rt = read_container(out / "model.rpwt")
        worst = 0.0
        for entry in refs:
            ids = (tokenizer(entry["prompt"])["input_ids"] if tokenizer is not None
                   else entry["ids"])
            mine = numpy_forward(rcfg, rt, ids)
            worst = max(worst, float(np.abs(mine - np.array(entry["logits"])).max()))
        print(f"check: worst logit deviation {worst:.2e}")
        if worst > 1e-3:
            sys.exit("check failed: converted weights do not reproduce the torch logits")


if __name__ == "__main__":
    main()
