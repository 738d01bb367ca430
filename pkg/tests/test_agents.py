import pytest

from slak.agents import (
    MAX_REPAIRS,
    AgentError,
    MockChatClient,
    RemoteChatClient,
    client_from_env,
    load_transcript_turns,
    parse_response,
    propose_metapaths,
    recommend,
    render_propose_prompt,
    render_schema_prompt,
    run_communication_round,
    self_update,
)
from slak.dataio import INDICATORS
from slak.kg import ENTITY_TYPES, parse_schema
from slak.metapath import parse_metapath

from conftest import HTTPStub

P = parse_metapath
GOLDEN_SINGLE = [
    P("Region -[HasStoreOf]-> Brand -[BrandExistIn]-> POI -[LocateAt]-> Region"),
    P("Region -[ServedBy]-> BusinessArea -[Contain]-> POI -[LocateAt]-> Region"),
    P("Region -[Has]-> POI -[HasCategory1Of]-> Category1 -[Category1ExistIn]-> POI -[LocateAt]-> Region"),
]
GOLDEN_SELF_UPDATE = [
    P("Region -[Has]-> POI -[Competitive]-> POI -[LocateAt]-> Region"),
    P("Region -[HasStoreOf]-> Brand -[BelongToCategory1]-> Category1 -[Category1HasBrandOf]-> Brand"
      " -[BrandExistIn]-> POI -[LocateAt]-> Region"),
    P("Region -[ServedBy]-> BusinessArea -[Contain]-> POI -[Competitive]-> POI -[LocateAt]-> Region"),
]
REC_BY_POP = P("Region -[PopulationFlowTo]-> Region -[Has]-> POI -[HasCategory1Of]-> Category1"
               " -[Category1ExistIn]-> POI -[LocateAt]-> Region")

VALID3 = """Some thoughts first.
- Region -[Has]-> POI
name: venues
reason: more venues
- Region -[BorderBy]-> Region
- `Region -[NearBy]-> Region`
"""


def _round1():
    return {t: propose_metapaths(MockChatClient.shipped(t), t)[0] for t in INDICATORS}


def test_schema_prompt_lists_everything(schema):
    text = render_schema_prompt(schema)
    for t in ENTITY_TYPES:
        assert t in text
    for r in schema.relations:
        assert f"- {r.name}: {r.head_type} -> {r.tail_type}." in text
    assert "7 entity types" in text and "35 relation types" in text
    assert render_schema_prompt(schema) == text


def test_schema_prompt_single_relation():
    s = parse_schema("Has\tRegion\tPOI\tregion contains the POI\n")
    lines = [l for l in render_schema_prompt(s).splitlines() if l.startswith("- ")]
    assert lines == ["- Has: Region -> POI. region contains the POI"]


def test_propose_prompt_mentions_task_and_count(schema):
    text = render_propose_prompt(schema, "rating", "Predict ratings.", 3)
    assert "'rating'" in text and "Predict ratings." in text and "Propose 3 meta-paths" in text


def test_parse_response_tolerates_prose_and_decoration():
    parsed = parse_response(VALID3)
    assert [str(p.metapath) for p in parsed.paths] == [
        "Region -[Has]-> POI", "Region -[BorderBy]-> Region", "Region -[NearBy]-> Region"
    ]
    assert parsed.paths[0].name == "venues" and parsed.paths[0].reason == "more venues"
    assert parsed.errors == []
    bad = parse_response("Region -[Has]-> Brand\nPOI -[LocateAt]-> Region\n")
    assert bad.paths == [] and len(bad.errors) == 2


def test_mock_passthrough_and_postcondition():
    paths, tr = propose_metapaths(MockChatClient.shipped("user_activity"), "user_activity")
    assert paths == GOLDEN_SINGLE
    assert all(p.start_type == "Region" for p in paths)
    assert len(tr.turns) == 1 and [a.metapath for a in tr.accepted] == GOLDEN_SINGLE
    assert tr.accepted[0].name == "brand reach" and tr.accepted[0].reason


def test_repair_loop_two_turns(tmp_path):
    first = "Region -[Has]-> Brand\nRegion -[Has]-> POI\nRegion -[BorderBy]-> Region\n"
    client = MockChatClient("t", {"propose": [first, VALID3]})
    paths, tr = propose_metapaths(client, "t")
    assert len(paths) == 3 and len(tr.turns) == 2
    assert "type-chain mismatch" in tr.turns[1][0]
    tr.save(tmp_path / "t.txt")
    turns = load_transcript_turns(tmp_path / "t.txt")
    assert turns == tr.turns
    # offline replay of the saved responses gives the same answer
    assert [a.metapath for a in parse_response(turns[-1][1]).paths] == paths


def test_repair_loop_gives_up():
    client = MockChatClient("t", {"propose": "Region -[Owns]-> POI\n"})
    with pytest.raises(AgentError) as info:
        propose_metapaths(client, "t")
    assert len(info.value.transcript.turns) == MAX_REPAIRS + 1


def test_wrong_count_triggers_repair():
    client = MockChatClient("t", {"propose": ["Region -[Has]-> POI\nRegion -[Has]-> POI\n", VALID3]})
    paths, tr = propose_metapaths(client, "t")
    assert len(tr.turns) == 2 and "repeated" in tr.turns[1][0]


def test_self_update_golden_and_fixpoint():
    r1 = _round1()
    paths, tr = self_update(MockChatClient.shipped("user_activity"), "user_activity", r1["user_activity"], r1)
    assert paths == GOLDEN_SELF_UPDATE and len(paths[1]) == 5
    same = MockChatClient("t", {"self_update": VALID3})
    own = [a.metapath for a in parse_response(VALID3).paths]
    assert self_update(same, "t", own, {"t": own})[0] == own


def test_recommend_golden_and_precondition():
    r1 = _round1()
    path, tr = recommend(MockChatClient.shipped("population"), "population", "user_activity", r1)
    assert path == REC_BY_POP and len(path) == 5
    assert tr.purpose == "recommend:user_activity"
    with pytest.raises(ValueError):
        recommend(MockChatClient.shipped("population"), "population", "population", r1)


def _clients():
    return {t: MockChatClient.shipped(t) for t in INDICATORS}


def test_round_sizes_four_tasks():
    res = run_communication_round(_clients(), _round1())
    assert res.pre_dedup_sizes == {t: 6 for t in INDICATORS}
    assert len(res.paths["user_activity"]) == 5 and res.duplicates["user_activity"]
    assert res.paths["user_activity"][:3] == GOLDEN_SELF_UPDATE
    assert res.recommended["user_activity"]["population"] == REC_BY_POP
    for t in INDICATORS:
        assert len(res.paths[t]) == 6 - len(res.duplicates[t])
        assert len(set(res.paths[t])) == len(res.paths[t])
    assert len(res.transcripts) == 4 + 4 * 3


def test_round_sizes_two_tasks():
    r1 = {t: p for t, p in _round1().items() if t in ("population", "commercial")}
    res = run_communication_round(_clients(), r1)
    assert res.pre_dedup_sizes == {"population": 4, "commercial": 4}


@pytest.mark.parametrize("flag", ["no_self_update", "no_rec"])
def test_round_ablation_flags(flag):
    res = run_communication_round(_clients(), _round1(), **{flag: True})
    purposes = {tr.purpose.split(":")[0] for tr in res.transcripts}
    if flag == "no_self_update":
        assert purposes == {"recommend"} and res.self_updated == {}
        assert res.pre_dedup_sizes == {t: 3 for t in INDICATORS}
    else:
        assert purposes == {"self_update"} and all(not r for r in res.recommended.values())
        assert res.pre_dedup_sizes == {t: 3 for t in INDICATORS}


def test_mock_transcripts_byte_identical():
    a = run_communication_round(_clients(), _round1())
    b = run_communication_round(_clients(), _round1())
    assert [t.to_text() for t in a.transcripts] == [t.to_text() for t in b.transcripts]


def test_missing_fixture_purpose():
    with pytest.raises(AgentError, match="no fixture"):
        propose_metapaths(MockChatClient("t", {}), "t")


def test_client_from_env(monkeypatch, tmp_path):
    monkeypatch.delenv("LLM_ENDPOINT", raising=False)
    assert client_from_env("rating").mode == "mock"
    monkeypatch.setenv("LLM_ENDPOINT", "http://127.0.0.1:9/chat")
    assert client_from_env("rating").mode == "remote"
    assert client_from_env("rating", mock=True).mode == "mock"
    (tmp_path / "rating.yaml").write_text("task: rating\nresponses:\n  propose: x\n")
    assert client_from_env("rating", mock=True, fixture_dir=tmp_path).source.endswith("rating.yaml")


@pytest.mark.parametrize("body", [
    {"choices": [{"message": {"content": VALID3}}]},
    {"message": {"content": VALID3}},
    {"response": VALID3},
])
def test_remote_chat_client(body):
    with HTTPStub([(500, {}), (200, body)]) as stub:
        client = RemoteChatClient(stub.url, model="m", api_key="k", backoff=0.0, timeout=5)
        paths, tr = propose_metapaths(client, "t")
    assert len(paths) == 3 and len(stub.requests) == 2
    payload, auth = stub.requests[-1]
    assert payload["model"] == "m" and payload["temperature"] == 0.0 and auth == "Bearer k"
    assert payload["messages"][0]["role"] == "user"


def test_remote_chat_malformed():
    with HTTPStub([(200, {"choices": []})]) as stub:
        with pytest.raises(AgentError, match="malformed"):
            RemoteChatClient(stub.url, backoff=0.0, timeout=5).complete([{"role": "user", "content": "x"}], "p")
