import pytest

from pointperc.config import ConfigError, echo_config, parse_config, parse_config_lines


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text("")
    run = parse_config(p)
    assert run.train.lr == 1e-4
    assert run.train.weight_decay == 1e-2
    assert run.train.epochs == 36
    assert run.train.range_min == (-50.0, -50.0, -5.0)
    assert run.train.range_max == (50.0, 50.0, 3.0)
    assert run.train.scale_range == (0.95, 1.05)
    assert run.train.rotate_range_deg == (-45.0, 45.0)
    assert run.train.flip_prob == 0.5
    assert run.train.optimizer == "adamw"
    assert run.model.window_size == 32


def test_window_size_honored():
    run = parse_config_lines(["window_size = 16"])
    assert run.model.window_size == 16


def test_window_size_wrong_type():
    with pytest.raises(ConfigError, match="window_size.*expected int"):
        parse_config_lines(['window_size = "big"'])


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'window_sz'"):
        parse_config_lines(["window_sz = 32"])


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_lines(["heads = 2", "heads = 4"])


def test_comments_and_blanks():
    run = parse_config_lines([
        "# a full-line comment",
        "",
        "heads = 2  # trailing comment",
        'task = "multi"',
    ])
    assert run.model.heads == 2
    assert run.train.task == "multi"


def test_bare_word_strings():
    run = parse_config_lines(["search = knn", "task = seg"])
    assert run.model.search == "knn"
    assert run.train.task == "seg"


def test_lists_and_vectors():
    run = parse_config_lines([
        "stage_dims = [8, 16]",
        "stage_cells = [0.5]",
        "stage_radii = [1.0, 2.0]",
        "stage_depths = [1, 1]",
        "range_min = [-20, -20, -2]",
        "range_max = [20, 20, 4]",
    ])
    assert run.model.stage_dims == (8, 16)
    assert run.model.stage_cells == (0.5,)
    assert run.train.range_min == (-20.0, -20.0, -2.0)


def test_vector_length_checked():
    with pytest.raises(ConfigError, match="range_min.*3 floats"):
        parse_config_lines(["range_min = [-20, -20]"])


def test_int_field_rejects_float():
    with pytest.raises(ConfigError, match="epochs.*expected int"):
        parse_config_lines(["epochs = 3.5"])


def test_float_field_accepts_int():
    run = parse_config_lines(["learning_rate = 1"])
    assert run.train.lr == 1.0


def test_list_element_type_checked():
    with pytest.raises(ConfigError, match="stage_depths"):
        parse_config_lines(["stage_depths = [1, 1.5]"])


def test_bool_fields():
    assert parse_config_lines(["augment = false"]).train.augment is False
    with pytest.raises(ConfigError, match="augment.*expected bool"):
        parse_config_lines(["augment = 1"])


def test_missing_equals():
    with pytest.raises(ConfigError, match="config:1"):
        parse_config_lines(["heads 2"])


def test_line_numbers_in_errors(tmp_path):
    p = tmp_path / "bad.conf"
    p.write_text("heads = 2\nnope = 3\n")
    with pytest.raises(ConfigError, match=r"bad\.conf:2"):
        parse_config(p)


def test_dataclass_validation_wrapped():
    # value parses but violates an architecture invariant
    with pytest.raises(ConfigError, match="search"):
        parse_config_lines(["search = octree"])


def test_echo_round_trip():
    run = parse_config_lines([
        "stage_dims = [8, 16]",
        "stage_cells = [0.5]",
        "stage_radii = [1.0, 2.0]",
        "stage_depths = [1, 1]",
        "window_size = 16",
        "search = knn",
        "learning_rate = 0.003",
        "epochs = 2",
        "flip_prob = 0.25",
    ])
    lines = echo_config(run)
    again = parse_config_lines(lines)
    assert again == run
    assert echo_config(again) == lines


def test_echo_covers_every_key():
    lines = echo_config(parse_config_lines([]))
    keys = {ln.split("=")[0].strip() for ln in lines}
    assert {"window_size", "search", "learning_rate", "weight_decay",
            "epochs", "range_min", "object_count"} <= keys
