"""Recompute the bundled suite's expected values from plain-Python models.

Each model tracks the state a correct agent leaves behind after every turn,
written directly from the turn descriptions (no setup or oracle code from the
suite is executed). Every `eq` and `len_eq` assertion in the suite must be
covered by a model value and agree with it.
"""

import copy
import json
import math
import sys
from pathlib import Path


def trace(initial, steps):
    """Applies each step to a copy of the state; returns the state after each."""
    state = copy.deepcopy(initial)
    out = []
    for step in steps:
        step(state)
        out.append(copy.deepcopy(state))
    return out


def string_split_join():
    def t1(s):
        s["text"] = " | ".join(["a", "b", "c"])

    def t2(s):
        s["text"] = " | ".join(sorted(s["text"].split(" | ")))

    def t3(s):
        s["text"] = " | ".join(s["text"].split(" | ")[::-1])

    return trace({"text": ""}, [t1, t2, t3])


def dict_nested():
    scores = {"math": 85, "english": 90}

    def t1(s):
        s["scores"]["math"] = 90

    def t2(s):
        s["scores"]["science"] = 88

    def t3(s):
        s["scores"] = {k: v + 5 for k, v in s["scores"].items()}

    states = trace({"scores": scores}, [t1, t2, t3])
    return [
        {f"data['scores']['{k}']": v for k, v in st["scores"].items()} | {"data['student']": "Dana"}
        for st in states
    ]


def stack_advanced():
    pages = ["A", "B", "C", "D"]
    popped = len(pages) - 1
    return [
        {"stack.size()": 4, "stack.peek()": pages[-1]},
        {"stack.size()": 1, "result_num": popped},
        {"stack.size()": 1, "result_str": pages[0]},
    ]


def cart_quantity():
    items = [("Apple", 10.0, 3), ("Orange", 5.0, 2)]
    return [
        {"len:cart.items": 1, "cart.items[0]['quantity']": items[0][2]},
        {"len:cart.items": 2, "cart.items[1]['quantity']": items[1][2]},
        {"len:cart.items": 2, "result_num": sum(p * q for _, p, q in items)},
    ]


def dataframe_merge():
    prices = {"Phone": 500.0, "Shirt": 50.0, "Laptop": 1200.0, "Desk": 300.0}
    suppliers = {"Phone": "SupA", "Shirt": "SupA", "Laptop": "SupB"}
    merged = [p for p in prices if p in suppliers]
    kept = [p for p in merged if suppliers[p] == "SupA"]
    return [
        {"len:result_df": len(merged)},
        {"len:result_df": len(kept), "result_df['product']": kept},
        {"result_value": sum(prices[p] for p in kept)},
    ]


def dataframe_pivot():
    sales = {("North", "Q1"): 150, ("North", "Q2"): 130, ("South", "Q1"): 200,
             ("South", "Q2"): 180, ("East", "Q1"): 120, ("East", "Q2"): 110}
    regions = sorted({r for r, _ in sales})
    quarters = sorted({q for _, q in sales})
    per_region = {r: sum(v for (rr, _), v in sales.items() if rr == r) for r in regions}
    best = max(per_region, key=per_region.get)
    return [
        {"result_df.shape": [len(regions), len(quarters)]},
        {"result_value": sum(sales.values())},
        {"result_value": per_region[best], "result_region": best},
    ]


def ndarray_reshape():
    values = [10, 15, 20, 25, 8, 10, 12, 18]
    rows = [values[:4], values[4:]]
    return [
        {"result_array.shape": [2, 4]},
        {"result_sums": [sum(r) for r in rows]},
        {"result_value": sum(values)},
    ]


def startup_journey():
    s = {
        "company_name": "TechStart", "industry": "Software", "ceo": "Alice Johnson",
        "headquarters": "San Francisco", "employees": 50, "founded_year": 2020, "offices": 1,
        "products": 2, "revenue": 5e6, "profit_margin": 0.1, "stock_price": 0.0, "market_cap": 0.0,
        "public": False, "profitable": True, "hiring": True, "international": False,
        "departments": ["Engineering", "Sales", "Marketing"], "locations": ["SF"],
        "financials": {"funding": 10_000_000, "round": "Series A"},
        "contacts": {"email": "info@techstart.com", "phone": "555-0100"},
    }

    def t1(state):
        state.update(copy.deepcopy(s))

    def t2(state):
        state.update(employees=150, offices=3, products=5, revenue=15e6, profit_margin=0.15, international=True)
        state["departments"] += ["HR", "Finance"]
        state["locations"] += ["NYC", "London"]
        state["financials"]["valuation"] = 100_000_000
        state["contacts"]["support"] = "555-0200"

    def t3(state):
        state["company_name"] += " Inc."
        state.update(industry="Enterprise Software", employees=500, offices=10, products=10, revenue=50e6,
                     profit_margin=0.2, stock_price=25.0, market_cap=500e6, public=True)
        state["departments"] += ["Legal", "IR"]
        state["locations"] += ["Tokyo", "Berlin"]
        state["financials"]["ipo"] = True
        state["contacts"]["ir"] = "ir@techstart.com"

    return trace({}, [t1, t2, t3])


def warehouse_inventory():
    def t1(s):
        s.update(sku="W-100", stock=40, reorder_level=10, unit_cost=2.5, suppliers=["Acme"])

    def t2(s):
        s["stock"] -= 15
        s["suppliers"].append("Globex")

    def t3(s):
        s["stock"] += 3 * s["reorder_level"]
        s["unit_cost"] = s["unit_cost"] * 1.1

    return trace({}, [t1, t2, t3])


def carol_debt_paydown():
    def pct(value, numerator, denominator=100):
        return value * numerator // denominator

    def interest(s):
        s["loan_balance"] += math.floor(s["loan_balance"] * 8 / 100)

    def pay(s, amount):
        s["balance"] -= amount
        s["loan_balance"] -= amount

    def deposit(amount):
        return lambda s: s.__setitem__("balance", s["balance"] + amount)

    def t1(s):
        s.update(name="Carol", balance=500, status="standard", interest_rate=0.08, loan_balance=2000, savings=0)

    def t4(s):
        pay(s, min(pct(s["balance"], 15), pct(s["loan_balance"], 15)))

    def t5(s):
        moved = pct(s["balance"], 20)
        s["balance"] -= moved
        s["savings"] += moved

    def t8(s):
        pay(s, max(pct(s["balance"], 40), 500))

    def t11(s):
        pay(s, pct(s["loan_balance"], 25))

    def t13(s):
        s["balance"] += 437
        pay(s, pct(s["balance"], 75, 1000))

    def t14(s):
        if s["loan_balance"] < s["balance"]:
            s["status"] = "premium"

    def t15(s):
        if s["status"] == "premium":
            s["balance"] += 500

    def t16(s):
        if s["balance"] > s["loan_balance"]:
            pay(s, s["loan_balance"])
        else:
            pay(s, pct(s["balance"], 75))

    steps = [t1, interest, deposit(800), t4, t5, interest, deposit(690), t8, deposit(800), interest, t11,
             interest, t13, t14, t15, t16]
    return trace({}, steps)


def weekend_party():
    s = {
        "thermostat.temperature": 18, "thermostat.mode": "eco",
        "living_light.brightness": 30, "living_light.on": True,
        "bedroom_light.brightness": 0, "bedroom_light.on": False,
        "blinds.position": 0, "music.volume": 0, "camera.status": "idle",
        "front_door.locked": True, "outdoor_temp": 15,
    }

    def light(name, level):
        def f(st):
            st[f"{name}.brightness"] = level
            st[f"{name}.on"] = level > 0
        return f

    def turn_on(name):
        def f(st):
            if st[f"{name}.brightness"] == 0:
                st[f"{name}.brightness"] = 100
            st[f"{name}.on"] = True
        return f

    def setter(**values):
        mapping = {"temp": "thermostat.temperature", "mode": "thermostat.mode", "blinds": "blinds.position",
                   "volume": "music.volume", "camera": "camera.status", "locked": "front_door.locked",
                   "outdoor": "outdoor_temp"}
        return lambda st: st.update({mapping[k]: v for k, v in values.items()})

    def seq(*fs):
        def f(st):
            for fn in fs:
                fn(st)
        return f

    def heating_check(st):
        st["outdoor_temp"] = 12
        if st["outdoor_temp"] < 10:
            st["thermostat.temperature"] = 22

    steps = [
        seq(turn_on("bedroom_light"), setter(blinds=50)),
        setter(temp=21, mode="comfort", camera="recording", blinds=0),
        seq(setter(temp=21, mode="comfort", volume=40, blinds=100), light("living_light", 80)),
        setter(locked=False, volume=50),
        seq(setter(volume=60, camera="recording"), light("living_light", 90)),
        setter(blinds=30, temp=20),
        seq(setter(blinds=0, volume=70), light("living_light", 60)),
        setter(volume=80, temp=19),
        light("living_light", 40),
        seq(setter(volume=50, locked=True), light("bedroom_light", 0)),
        seq(setter(volume=0), light("living_light", 0)),
        setter(temp=18, mode="eco"),
        light("living_light", 30),
        light("living_light", 0),
        heating_check,
        setter(volume=20),
        seq(turn_on("bedroom_light"), setter(blinds=70, temp=21, mode="comfort")),
        setter(volume=30),
        seq(setter(volume=0, locked=True, camera="recording"), light("living_light", 0), light("bedroom_light", 0)),
        setter(temp=18, mode="eco", blinds=0),
    ]
    return trace(s, steps)


MODELS = {
    "string_split_join": string_split_join,
    "dict_nested": dict_nested,
    "stack_advanced": stack_advanced,
    "cart_quantity": cart_quantity,
    "dataframe_merge": dataframe_merge,
    "dataframe_pivot": dataframe_pivot,
    "ndarray_reshape": ndarray_reshape,
    "startup_journey": startup_journey,
    "warehouse_inventory": warehouse_inventory,
    "carol_debt_paydown": carol_debt_paydown,
    "weekend_party": weekend_party,
}


def same(expected, actual):
    if isinstance(expected, bool) or isinstance(actual, bool):
        return expected is actual
    if isinstance(expected, (int, float)) and isinstance(actual, (int, float)):
        return math.isclose(expected, actual, rel_tol=1e-9, abs_tol=0.0)
    if isinstance(expected, (list, tuple)) and isinstance(actual, (list, tuple)):
        return len(expected) == len(actual) and all(same(e, a) for e, a in zip(expected, actual))
    if isinstance(expected, dict) and isinstance(actual, dict):
        return expected.keys() == actual.keys() and all(same(v, actual[k]) for k, v in expected.items())
    return expected == actual


def main(suite_dir):
    files = sorted(Path(suite_dir).glob("*.json"))
    if not files:
        print(f"no cases under {suite_dir}")
        return 1
    failures = 0
    compared = 0
    for path in files:
        case = json.loads(path.read_text())
        model = MODELS.get(case["id"])
        if model is None:
            print(f"FAIL {case['id']}: no independent model")
            failures += 1
            continue
        states = model()
        if len(states) != len(case["turns"]):
            print(f"FAIL {case['id']}: model has {len(states)} turns, suite has {len(case['turns'])}")
            failures += 1
            continue
        for index, (turn, state) in enumerate(zip(case["turns"], states), start=1):
            for a in turn["validator"].get("assertions", []):
                if a["op"] not in ("eq", "len_eq"):
                    continue
                key = a["path"] if a["op"] == "eq" else "len:" + a["path"]
                compared += 1
                if key not in state:
                    print(f"FAIL {case['id']} T{index}: {key} not covered by the model")
                    failures += 1
                elif not same(a["expected"], state[key]):
                    print(f"FAIL {case['id']} T{index}: {key} expected {a['expected']!r}, model {state[key]!r}")
                    failures += 1
    print(f"{compared} assertions compared, {failures} mismatches")
    return 0 if failures == 0 else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "data/suites/appendix_e"))
