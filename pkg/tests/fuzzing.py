"""Malformed-file generators. Every mutation yields an input that must be
rejected with a typed error."""
import copy
import json
import struct

import numpy as np

from crossview.store import HEADER_SIZE, encode_matrix


def emb1_mutations(rng, n):
    base = encode_matrix(rng.standard_normal((5, 8)).astype(np.float32))
    kinds = [
        "truncate_header", "truncate_payload", "extend_payload", "bad_magic", "bad_version",
        "bad_dtype", "inflate_rows", "inflate_dim", "shrink_rows", "nan_payload", "inf_payload",
        "pad_bytes", "empty",
    ]
    for i in range(n):
        kind = kinds[i % len(kinds)]
        b = bytearray(base)
        if kind == "truncate_header":
            b = b[: int(rng.integers(1, HEADER_SIZE))]
        elif kind == "truncate_payload":
            b = b[: int(rng.integers(HEADER_SIZE, len(b)))]
        elif kind == "extend_payload":
            b += bytes(int(rng.integers(1, 9)))
        elif kind == "bad_magic":
            pos = int(rng.integers(0, 4))
            b[pos] = (b[pos] + int(rng.integers(1, 255))) % 256
        elif kind == "bad_version":
            struct.pack_into("<I", b, 4, int(rng.integers(2, 1 << 31)))
        elif kind == "bad_dtype":
            b[16] = int(rng.choice([0, 2, 3, 7, 255]))
        elif kind == "inflate_rows":
            struct.pack_into("<I", b, 8, 5 + int(rng.integers(1, 1 << 20)))
        elif kind == "inflate_dim":
            struct.pack_into("<I", b, 12, 8 + int(rng.integers(1, 1 << 20)))
        elif kind == "shrink_rows":
            struct.pack_into("<I", b, 8, int(rng.integers(0, 5)))
        elif kind == "nan_payload":
            struct.pack_into("<f", b, HEADER_SIZE + 4 * int(rng.integers(0, 40)), float("nan"))
        elif kind == "inf_payload":
            struct.pack_into("<f", b, HEADER_SIZE + 4 * int(rng.integers(0, 40)), float("inf"))
        elif kind == "pad_bytes":
            b[17 + int(rng.integers(0, 3))] = int(rng.integers(1, 256))
        elif kind == "empty":
            b = bytearray()
        yield kind, bytes(b)


def _locations(doc):
    return doc["locations"]


def manifest_mutations(doc, rng, n, n_ground, n_sat):
    """Yield (kind, mutated manifest JSON text)."""
    loc_fields = ["id", "lat", "lon", "ground_rows", "sat_row"]
    kinds = [
        "drop_loc_field", "wrong_type", "three_ground_rows", "five_ground_rows", "ground_oob",
        "ground_negative", "sat_oob", "duplicate_id", "lat_range", "lon_range", "drop_top_field",
        "truncate_text", "not_object", "empty_locations", "bad_directions", "bad_format",
        "label_type", "bool_row", "nan_lat", "missing_matrix",
    ]
    for i in range(n):
        kind = kinds[i % len(kinds)]
        d = copy.deepcopy(doc)
        locs = _locations(d)
        j = int(rng.integers(0, len(locs)))
        text = None
        if kind == "drop_loc_field":
            del locs[j][loc_fields[int(rng.integers(0, len(loc_fields)))]]
        elif kind == "wrong_type":
            key = loc_fields[int(rng.integers(0, len(loc_fields)))]
            locs[j][key] = [{"x": 1}] if key != "ground_rows" else "nesw"
        elif kind == "three_ground_rows":
            locs[j]["ground_rows"] = locs[j]["ground_rows"][:3]
        elif kind == "five_ground_rows":
            locs[j]["ground_rows"] = locs[j]["ground_rows"] + [0]
        elif kind == "ground_oob":
            locs[j]["ground_rows"][int(rng.integers(0, 4))] = n_ground + int(rng.integers(0, 5))
        elif kind == "ground_negative":
            locs[j]["ground_rows"][int(rng.integers(0, 4))] = -1
        elif kind == "sat_oob":
            locs[j]["sat_row"] = n_sat + int(rng.integers(0, 5))
        elif kind == "duplicate_id":
            k = (j + 1) % len(locs)
            locs[k]["id"] = locs[j]["id"]
        elif kind == "lat_range":
            locs[j]["lat"] = float(rng.choice([-1, 1])) * float(rng.uniform(90.001, 1000))
        elif kind == "lon_range":
            locs[j]["lon"] = float(rng.choice([-1, 1])) * float(rng.uniform(180.001, 1000))
        elif kind == "drop_top_field":
            del d[["locations", "ground_matrix", "sat_matrix"][int(rng.integers(0, 3))]]
        elif kind == "truncate_text":
            full = json.dumps(d)
            text = full[: int(rng.integers(1, len(full) - 1))]
        elif kind == "not_object":
            text = json.dumps([d])
        elif kind == "empty_locations":
            d["locations"] = []
        elif kind == "bad_directions":
            d["directions"] = ["N", "S", "E", "W"]
        elif kind == "bad_format":
            d["format"] = "something-else/9"
        elif kind == "label_type":
            locs[j]["labels"] = ["forest"]
        elif kind == "bool_row":
            locs[j]["sat_row"] = True
        elif kind == "nan_lat":
            text = json.dumps(d).replace(json.dumps(locs[j]["lat"]), "NaN", 1)
        elif kind == "missing_matrix":
            d["ground_matrix"] = {"path": "does-not-exist.emb1", "normalized": True}
        yield kind, text if text is not None else json.dumps(d)


def prompt_mutations(doc, rng, n, n_rows):
    kinds = ["drop_classes", "empty_class", "row_oob", "row_type", "text_type", "no_name",
             "truncate_text", "bad_format", "missing_matrix", "score_type"]
    for i in range(n):
        kind = kinds[i % len(kinds)]
        d = copy.deepcopy(doc)
        c = int(rng.integers(0, len(d["classes"])))
        text = None
        if kind == "drop_classes":
            del d["classes"]
        elif kind == "empty_class":
            d["classes"][c]["prompts"] = []
        elif kind == "row_oob":
            d["classes"][c]["prompts"][0]["row"] = n_rows + int(rng.integers(0, 3))
        elif kind == "row_type":
            d["classes"][c]["prompts"][0]["row"] = "0"
        elif kind == "text_type":
            d["classes"][c]["prompts"][0]["text"] = 12
        elif kind == "no_name":
            del d["classes"][c]["name"]
        elif kind == "truncate_text":
            full = json.dumps(d)
            text = full[: int(rng.integers(1, len(full) - 1))]
        elif kind == "bad_format":
            d["format"] = 3
        elif kind == "missing_matrix":
            d["matrix_ref"] = "nope.emb1"
        elif kind == "score_type":
            d["classes"][c]["prompts"][0]["score"] = "high"
        yield kind, text if text is not None else json.dumps(d)
