import json
import sys
from importlib import resources
from unittest.mock import Mock

import click
import pytest
from click.testing import CliRunner

from gazeqa import formats
from gazeqa.checkpoint import load_checkpoint
from gazeqa.chunks import loss_mask, tokenize
from gazeqa.cli.commands import (
    DEFAULT_OUTPUT_FORMAT,
    VALID_OUTPUT_FORMATS,
    assemble_dataset,
    build_heatmap,
    check_frozen_parameters,
    check_gradients,
    check_neutrality,
    cli,
    colors,
    generate_all,
    judge_all,
    load_narratives,
    load_tracks,
    main,
    make_generator,
    run_sweep,
    set_color_use,
    set_spinner_use,
    spinner,
    train,
    validate_modes,
    validate_output_format,
    validate_positive,
    validate_rates,
)
from gazeqa.cli.config import RunConfig
from gazeqa.perceiver import GradientCheckReport


@pytest.fixture
def mock_print(mocker):
    return mocker.patch("gazeqa.cli.commands.print")


@pytest.fixture
def mock_isatty(mocker):
    return mocker.patch("gazeqa.cli.commands.sys.stdin.isatty", Mock(return_value=True))


@pytest.fixture
def mock_set_color_use(mocker):
    return mocker.patch("gazeqa.cli.commands.set_color_use")


@pytest.fixture
def mock_set_spinner_use(mocker):
    return mocker.patch("gazeqa.cli.commands.set_spinner_use")


def data_file(name):
    return resources.files("gazeqa").joinpath("data", name).read_text(encoding="utf-8").strip()


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return str(path)


class TestSpinnerSteps:
    @pytest.mark.parametrize(
        "step",
        [load_tracks, build_heatmap, run_sweep, load_narratives, generate_all, assemble_dataset,
         check_gradients, check_neutrality, check_frozen_parameters, train, judge_all]
    )
    def test_is_decorated_correctly(self, step):
        assert step.is_decorated_with_spinner


class TestSetColorUse:
    @pytest.mark.parametrize(
        "input,isatty,expected",
        [(True, True, True), (False, True, False), (True, False, False)]
    )
    def test_sets_color_option_using_user_input_and_interactivity_state(
            self, mocker, input, isatty, expected
    ):
        mocker.patch("gazeqa.cli.commands.sys.stdin.isatty", Mock(return_value=isatty))

        set_color_use(input)

        assert colors.use is expected


class TestSetSpinnerUse:
    @pytest.mark.parametrize(
        "input,isatty,expected",
        [(True, True, True), (False, True, False), (True, False, False)]
    )
    def test_sets_spinner_option_using_user_input_and_interactivity_state(
            self, mocker, input, isatty, expected
    ):
        mocker.patch("gazeqa.cli.commands.sys.stdin.isatty", Mock(return_value=isatty))

        set_spinner_use(input)

        assert spinner.use is expected


class TestValidators:
    @pytest.mark.parametrize(
        "fmt", VALID_OUTPUT_FORMATS + list(map(str.upper, VALID_OUTPUT_FORMATS))
    )
    def test_returns_lowered_format_if_valid(self, fmt):
        assert validate_output_format(Mock(), Mock(), fmt) == fmt.lower()

    def test_raises_when_format_invalid(self):
        with pytest.raises(click.BadParameter) as exc_info:
            validate_output_format(Mock(), Mock(), "invalid")

        assert "format should be one of" in str(exc_info.value)

    def test_default_format_is_valid(self):
        assert DEFAULT_OUTPUT_FORMAT in VALID_OUTPUT_FORMATS

    def test_parses_rates(self):
        assert validate_rates(Mock(), Mock(), "1-3,7") == [1, 2, 3, 7]
        assert validate_rates(Mock(), Mock(), None) is None

    def test_rejects_bad_rates(self):
        with pytest.raises(click.BadParameter) as exc_info:
            validate_rates(Mock(), Mock(), "3-1")

        assert "1,5,10-12" in str(exc_info.value)

    def test_rejects_values_below_one(self):
        param = Mock()
        param.name = "n_tracks"

        with pytest.raises(click.BadParameter) as exc_info:
            validate_positive(Mock(), param, 0)

        assert "n-tracks must be at least 1" in str(exc_info.value)
        assert validate_positive(Mock(), param, None) is None

    def test_splits_modes(self):
        assert validate_modes(Mock(), Mock(), "overall, grounding") == ["overall", "grounding"]

    @pytest.mark.parametrize("value", ["", "overall,style"])
    def test_rejects_unknown_modes(self, value):
        with pytest.raises(click.BadParameter):
            validate_modes(Mock(), Mock(), value)


class TestMakeGenerator:
    def test_needs_offline_file_or_endpoint(self):
        with pytest.raises(click.UsageError):
            make_generator(RunConfig(), None)

    def test_uses_http_endpoint_with_key_from_secrets(self, mocker):
        mocker.patch("gazeqa.cli.commands.get_secret", return_value="secret")

        generator = make_generator(RunConfig(generator_url="http://gen"), None)

        assert (generator.url, generator.api_key) == ("http://gen", "secret")


class CliTest:
    runner = CliRunner()


class TestCli(CliTest):
    def test_help(self):
        result = self.runner.invoke(cli, ["--help"])

        assert result.exit_code == 0
        assert "dual-order pairwise evaluation" in result.output

    def test_version_names_the_file_formats(self):
        result = self.runner.invoke(cli, ["--version"])

        assert result.exit_code == 0
        assert "VHM1, VPW1" in result.output

    def test_by_default_uses_colorful_output(self, mock_set_color_use):
        result = self.runner.invoke(cli, ["emd", "-h"])

        assert result.exit_code == 0
        mock_set_color_use.assert_called_once_with(True)

    def test_supports_option_to_set_use_color(self, mock_set_color_use):
        result = self.runner.invoke(cli, ["--no-color", "emd", "-h"])

        assert result.exit_code == 0
        mock_set_color_use.assert_called_once_with(False)

    def test_by_default_uses_spinner(self, mock_set_spinner_use):
        result = self.runner.invoke(cli, ["emd", "-h"])

        assert result.exit_code == 0
        mock_set_spinner_use.assert_called_once_with(True)

    def test_supports_option_to_set_spinner(self, mock_set_spinner_use):
        result = self.runner.invoke(cli, ["--no-spin", "emd", "-h"])

        assert result.exit_code == 0
        mock_set_spinner_use.assert_called_once_with(False)

    def test_rejects_zero_jobs(self):
        result = self.runner.invoke(cli, ["-j", "0", "emd", "-h"])

        assert result.exit_code == 2


class TestHeatmapAndEmd(CliTest):
    def test_writes_normalized_heatmap_sidecar_and_pgm(self, tmp_path):
        out = tmp_path / "gaze.vhm"

        result = self.runner.invoke(
            cli,
            ["heatmap", "--synthetic", "gaze", "-n", "3", "--grid", "16", "-o", str(out),
             "--pgm", str(tmp_path / "gaze.pgm")]
        )

        assert result.exit_code == 0, result.output
        heatmap = formats.load_heatmap(out)
        assert (heatmap.height, heatmap.width) == (16, 16)
        assert heatmap.is_normalized()
        sidecar = json.loads((tmp_path / "gaze.vhm.json").read_text())
        assert sidecar["format"] == "VHM1"
        assert sidecar["config"]["grid"] == 16
        assert (tmp_path / "gaze.pgm").read_bytes().startswith(b"P5")

    def test_config_file_sets_defaults(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text(json.dumps({"grid": 8, "n_tracks": 2}))
        out = tmp_path / "trace.vhm"

        result = self.runner.invoke(cli, ["-c", str(config), "heatmap", "-o", str(out)])

        assert result.exit_code == 0, result.output
        assert formats.load_heatmap(out).width == 8

    def test_reads_tracks_file(self, tmp_path):
        tracks = write_jsonl(
            tmp_path / "tracks.jsonl",
            [{"source": "gaze", "points": [[0.25, 0.25, 0.0], [0.75, 0.75, 0.1]]}]
        )
        out = tmp_path / "file.vhm"

        result = self.runner.invoke(cli, ["heatmap", "-t", tracks, "--grid", "8", "-o", str(out)])

        assert result.exit_code == 0, result.output
        assert formats.load_heatmap(out).is_normalized()

    def test_emd_of_a_heatmap_with_itself_is_zero(self, tmp_path):
        out = tmp_path / "gaze.vhm"
        self.runner.invoke(cli, ["heatmap", "--synthetic", "gaze", "-n", "2", "--grid", "8", "-o", str(out)])

        result = self.runner.invoke(cli, ["emd", str(out), str(out)])

        assert result.exit_code == 0
        assert result.output.strip() == "0.000000000000"


class TestSweep(CliTest):
    args = ["sweep", "-n", "3", "--grid", "16", "-r", "1-4", "--seed", "7"]

    def test_prints_curve_and_marks_minimum(self):
        result = self.runner.invoke(cli, self.args)

        assert result.exit_code == 0, result.output
        assert "◀ min" in result.output

    def test_json_rows(self):
        result = self.runner.invoke(cli, self.args + ["-f", "json"])

        assert result.exit_code == 0, result.output
        rows = json.loads(result.stdout)
        assert [r["rate"] for r in rows] == [1, 2, 3, 4]
        assert sum(r[""] == "◀ min" for r in rows) == 1

    def test_report_is_byte_identical_across_runs_and_jobs(self, tmp_path):
        first, second = tmp_path / "a.json", tmp_path / "b.json"

        self.runner.invoke(cli, self.args + ["-o", str(first)])
        self.runner.invoke(cli, ["-j", "3"] + self.args + ["-o", str(second)])

        report = json.loads(first.read_text())
        assert [p["rate"] for p in report["curve"]] == [1, 2, 3, 4]
        assert report["config"]["seed"] == 7
        assert json.loads(second.read_text())["curve"] == report["curve"]
        self.runner.invoke(cli, self.args + ["-o", str(second)])
        assert first.read_bytes() == second.read_bytes()

    def test_gaze_and_traces_go_together(self, tmp_path):
        tracks = write_jsonl(tmp_path / "t.jsonl", [{"source": "gaze", "points": [[0.5, 0.5, 0.0]]}])

        result = self.runner.invoke(cli, ["sweep", "-g", tracks])

        assert result.exit_code == 2
        assert "--gaze and --traces go together" in result.output

    def test_rejects_bad_rates(self):
        result = self.runner.invoke(cli, ["sweep", "-r", "x"])

        assert result.exit_code == 2


class TestAnnotate(CliTest):
    def setup_method(self, _):
        self.text = data_file("example_1_user.txt").split("Referable:", 1)[1]
        self.generation = data_file("example_1_assistant.txt")

    def narratives(self, tmp_path):
        points = [[i / 100, 0.5, i * 0.1] for i in range(100)]
        return write_jsonl(
            tmp_path / "narratives.jsonl",
            [{"image_id": "hydrant", "text": self.text, "source": "trace", "points": points}]
        )

    def test_offline_run_writes_dataset_and_stats(self, tmp_path):
        offline = tmp_path / "canned.json"
        offline.write_text(json.dumps({"hydrant": self.generation}))
        out = tmp_path / "qa.jsonl"

        result = self.runner.invoke(
            cli,
            ["annotate", "-i", self.narratives(tmp_path), "-o", str(out), "--tau", "0",
             "--offline", str(offline), "-f", "json"]
        )

        assert result.exit_code == 0, result.output
        stats = json.loads((tmp_path / "qa.jsonl.stats.json").read_text())
        records = list(formats.read_jsonl(out))
        assert stats["raw_count"] == 4
        assert stats["kept_count"] == len(records)
        assert stats["kept_count"] + len(stats["removals"]) == 4
        assert stats["config"]["tau"] == 0
        assert all(r["trace_segment"]["points"] for r in records)
        table = {row[""]: row["count"] for row in json.loads(result.stdout)}
        assert table["raw"] == 4

    def test_extra_keyword_removes_pairs(self, tmp_path):
        offline = tmp_path / "canned.json"
        offline.write_text(json.dumps({"hydrant": self.generation}))
        out = tmp_path / "qa.jsonl"

        result = self.runner.invoke(
            cli,
            ["annotate", "-i", self.narratives(tmp_path), "-o", str(out), "--tau", "0",
             "--offline", str(offline), "-k", "hydrant", "-k", "snow", "-k", "the"]
        )

        assert result.exit_code == 0, result.output
        stats = json.loads((tmp_path / "qa.jsonl.stats.json").read_text())
        assert stats["removed"]["keyword"] > 0
        assert "the" in stats["config"]["keywords"]

    def test_needs_a_generator(self, tmp_path):
        result = self.runner.invoke(
            cli, ["annotate", "-i", self.narratives(tmp_path), "-o", str(tmp_path / "qa.jsonl"), "--tau", "0"]
        )

        assert result.exit_code == 2
        assert "--offline" in result.output

    def test_tau_is_required(self, tmp_path):
        result = self.runner.invoke(cli, ["annotate", "-i", self.narratives(tmp_path), "-o", "qa.jsonl"])

        assert result.exit_code == 2


class TestFormatChunks(CliTest):
    def test_writes_text_tokens_and_mask(self, tmp_path):
        dataset = write_jsonl(
            tmp_path / "qa.jsonl",
            [{"image_id": "img", "tag_number": 1, "fact": "a hydrant",
              "trace_segment": {"source": "trace", "points": [[0.5, 0.5, 0.0]]},
              "direct_question": "what color is this?", "indirect_question": "what color is that?",
              "answer": "red.", "reward": None}]
        )
        out = tmp_path / "chunks.jsonl"

        result = self.runner.invoke(cli, ["format-chunks", "-i", dataset, "-o", str(out)])

        assert result.exit_code == 0, result.output
        [row] = list(formats.read_jsonl(out))
        assert "what color is this?" in row["text"]
        assert row["tokens"] == tokenize(row["text"])
        assert row["mask"] == loss_mask(row["tokens"])
        assert row["tokens"][-1] == "[endofchunk]"

    def test_uses_indirect_question(self, tmp_path):
        dataset = write_jsonl(
            tmp_path / "qa.jsonl",
            [{"image_id": "img", "tag_number": 1, "direct_question": "what color is this?",
              "indirect_question": "what color is that?", "answer": "red."}]
        )
        out = tmp_path / "chunks.jsonl"

        result = self.runner.invoke(cli, ["format-chunks", "-i", dataset, "-o", str(out), "-q", "indirect"])

        assert result.exit_code == 0, result.output
        assert "what color is that?" in next(formats.read_jsonl(out))["text"]


class TestPerceiverCheck(CliTest):
    def mock_checks(self, mocker, max_rel_error=1e-7, failures=0, changed=()):
        report = GradientCheckReport("scaled", "nested", 10, max_rel_error, "blocks.0.attn.query", 1e-4)
        mocker.patch("gazeqa.cli.commands.check_gradients", return_value=Mock(result=[report]))
        mocker.patch("gazeqa.cli.commands.check_neutrality", return_value=Mock(result=failures))
        mocker.patch("gazeqa.cli.commands.check_frozen_parameters", return_value=Mock(result=list(changed)))

    def test_passes_when_every_check_passes(self, mocker):
        self.mock_checks(mocker)

        result = self.runner.invoke(cli, ["perceiver-check", "-f", "json"])

        assert result.exit_code == 0, result.output
        rows = json.loads(result.stdout)
        assert [r["result"] for r in rows] == ["ok", "ok", "ok"]

    @pytest.mark.parametrize(
        "kwargs",
        [{"max_rel_error": 1e-2}, {"failures": 1}, {"changed": ["perceiver.latents"]}]
    )
    def test_exits_with_one_when_a_check_fails(self, mocker, kwargs):
        self.mock_checks(mocker, **kwargs)

        result = self.runner.invoke(cli, ["perceiver-check"])

        assert result.exit_code == 1
        assert "FAIL" in result.output

    def test_injected_bug_is_caught_by_gradient_check(self):
        reports = check_gradients(0, 16, True).result

        assert not all(r.passed for r in reports)

    def test_staged_unfreezing_keeps_frozen_tensors(self):
        assert check_frozen_parameters(0, steps=2).result == []

    def test_real_build_passes_every_check(self):
        result = self.runner.invoke(cli, ["perceiver-check", "--samples", "8", "--trials", "3", "-f", "json"])

        assert result.exit_code == 0, result.output
        rows = json.loads(result.stdout)
        assert len(rows) == 6
        assert all(r["result"] == "ok" for r in rows)


class TestTrainDemo(CliTest):
    def test_saves_checkpoint_and_sidecar(self, tmp_path):
        out = tmp_path / "stage1.vpw"

        result = self.runner.invoke(
            cli, ["train-demo", "--stage", "gaze_only", "--steps", "3", "--seed", "1", "-o", str(out), "-f", "json"]
        )

        assert result.exit_code == 0, result.output
        curve = json.loads(result.stdout)
        assert curve[-1]["step"] == 3
        weights = load_checkpoint(out)
        sidecar = json.loads((tmp_path / "stage1.vpw.json").read_text())
        assert sidecar["format"] == "VPW1"
        assert sidecar["config"]["stage"] == "gaze_only"
        assert sidecar["resampler"] == weights.config.to_json()

    def test_resumes_from_checkpoint(self, tmp_path):
        stage1, stage2 = tmp_path / "stage1.vpw", tmp_path / "stage2.vpw"
        self.runner.invoke(cli, ["train-demo", "--stage", "gaze_only", "--steps", "2", "-o", str(stage1)])

        result = self.runner.invoke(
            cli,
            ["train-demo", "--steps", "2", "--schedule", "cosine", "--clip-norm", "1.0",
             "--resume", str(stage1), "-o", str(stage2)]
        )

        assert result.exit_code == 0, result.output
        first, second = load_checkpoint(stage1), load_checkpoint(stage2)
        assert first.config == second.config
        assert any(not (first[n] == second[n]).all() for n in first.names())

    def test_adamw_lowers_the_loss_and_is_recorded_in_the_sidecar(self, tmp_path):
        out = tmp_path / "adamw.vpw"

        result = self.runner.invoke(
            cli,
            ["train-demo", "--optimizer", "adamw", "--lr", "0.01", "--steps", "30", "-o", str(out), "-f", "json"]
        )

        assert result.exit_code == 0, result.output
        losses = [row["loss"] for row in json.loads(result.stdout)]
        assert losses[-1] < losses[0]
        assert json.loads((tmp_path / "adamw.vpw.json").read_text())["config"]["optimizer"] == "adamw"

    def test_frozen_stage_leaves_loss_unchanged(self):
        result = self.runner.invoke(cli, ["train-demo", "--stage", "frozen", "--steps", "2", "-f", "json"])

        assert result.exit_code == 0, result.output
        losses = [row["loss"] for row in json.loads(result.stdout)]
        assert losses[0] == losses[-1]


class TestEvaluate(CliTest):
    def files(self, tmp_path):
        dataset = write_jsonl(
            tmp_path / "dataset.jsonl",
            [{"key": k, "question": "what is it?", "fact": "a cat", "gt_answer": "A cat."} for k in ("q1", "q2")]
        )
        a = write_jsonl(tmp_path / "a.jsonl", [{"key": "q1", "response": "A grey cat."},
                                                 {"key": "q2", "response": "Cat."}])
        b = write_jsonl(tmp_path / "b.jsonl", [{"key": "q1", "response": "Cat."},
                                                 {"key": "q2", "response": "A small cat."}])
        return dataset, a, b

    def test_position_biased_judge_gives_ties(self, tmp_path):
        dataset, a, b = self.files(tmp_path)

        result = self.runner.invoke(
            cli,
            ["evaluate", "-d", dataset, "-a", a, "-b", b, "-m", "overall", "--judge", "rule:first-position",
             "-f", "json"]
        )

        assert result.exit_code == 0, result.output
        report = json.loads(result.stdout)
        assert report["aggregates"]["overall"]["ties"] == 2
        assert report["config"]["judge"] == "rule:first-position"

    def test_writes_report_audit_and_rewards(self, tmp_path):
        dataset, a, b = self.files(tmp_path)
        out, audit = tmp_path / "report.json", tmp_path / "audit.jsonl"

        result = self.runner.invoke(
            cli,
            ["evaluate", "-d", dataset, "-a", a, "-b", b, "--judge", "rule:longer-answer",
             "--scorer", "word-count", "-o", str(out), "--audit", str(audit)]
        )

        assert result.exit_code == 0, result.output
        report = json.loads(out.read_text())
        overall = report["aggregates"]["overall"]
        assert (overall["wins_a"], overall["ties"], overall["wins_b"]) == (1, 0, 1)
        assert overall["mean_reward_a"] == 2.0
        assert overall["mean_reward_b"] == 2.0
        assert len(list(formats.read_jsonl(audit))) == 6

    def test_unknown_judge_fails(self, tmp_path):
        dataset, a, b = self.files(tmp_path)

        result = self.runner.invoke(cli, ["evaluate", "-d", dataset, "-a", a, "-b", b, "--judge", "oracle"])

        assert result.exit_code == 1
        assert "cannot understand judge" in str(result.exception)


class TestMain:
    def test_runs_cli(self, mocker):
        mock_cli = mocker.patch("gazeqa.cli.commands.cli")

        main()

        mock_cli.assert_called_once()

    def test_catches_exceptions_and_exits(self, mocker, mock_print):
        mocker.patch("gazeqa.cli.commands.hide_cursor")
        mocker.patch("gazeqa.cli.commands.show_cursor")
        mock_cli = mocker.patch("gazeqa.cli.commands.cli")
        exc = Exception("foo")
        mock_cli.side_effect = exc
        mock_exit = mocker.patch("gazeqa.cli.commands.sys.exit")

        main()

        mock_print.assert_called_once_with(exc, file=sys.stderr)
        mock_exit.assert_called_once_with(1)

    def test_hides_and_shows_the_cursor_when_in_interactive_shell(self, mocker, mock_isatty):
        mocker.patch("gazeqa.cli.commands.cli")
        mock_hide = mocker.patch("gazeqa.cli.commands.hide_cursor")
        mock_show = mocker.patch("gazeqa.cli.commands.show_cursor")

        main()

        mock_hide.assert_called_once()
        mock_show.assert_called_once()

    def test_does_not_hide_or_show_the_cursor_when_in_not_interactive_shell(
            self, mocker, mock_isatty
    ):
        mocker.patch("gazeqa.cli.commands.cli")
        mock_isatty.return_value = False
        mock_hide = mocker.patch("gazeqa.cli.commands.hide_cursor")
        mock_show = mocker.patch("gazeqa.cli.commands.show_cursor")

        main()

        assert not mock_hide.called
        assert not mock_show.called
