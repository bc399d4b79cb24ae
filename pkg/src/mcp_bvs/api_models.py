"""Pydantic models for pipeline configuration and command responses."""

from enum import StrEnum
from typing import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ScheduleKind(StrEnum):
    """Enum for masking-ratio schedule shapes."""

    COSINE = "cosine"
    LINEAR = "linear"
    SQUARE = "square"


class PositionalKind(StrEnum):
    """Enum for positional encoding kinds."""

    LEARNED = "learned"


class Stage(StrEnum):
    """Enum for trainable pipeline stages."""

    V2AS = "v2as"
    VS2A = "vs2a"
    SINGLE = "single"


class GenerateMode(StrEnum):
    """Enum for where the speech condition of a generation comes from and which stages run."""

    SPEECH = "speech"
    TRANSCRIPT = "transcript"
    AUDIO = "audio"
    RECONSTRUCT = "reconstruct"
    SINGLE = "single"  # own speech through the single-stage model, no semantic tokens


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class VocabSpec(_Strict):
    """Sizes of every token vocabulary."""

    speech_vocab_size: int = Field(33, description="Speech ids; 0 is SILENCE")
    background_vocab_size: int = Field(16, description="Background ids; 0 is QUIET")
    acoustic_layers: int = Field(4, description="Number of acoustic codebooks K")
    acoustic_vocab_per_layer: int = Field(8, description="Codebook size B")

    @property
    def semantic_vocab_size(self) -> int:
        return self.speech_vocab_size * self.background_vocab_size

    @property
    def speech_mask_id(self) -> int:
        return self.speech_vocab_size

    @property
    def semantic_mask_id(self) -> int:
        return self.semantic_vocab_size

    @property
    def acoustic_mask_id(self) -> int:
        return self.acoustic_vocab_per_layer

    @model_validator(mode="after")
    def _check_sizes(self) -> Self:
        if self.speech_vocab_size < 2 or self.background_vocab_size < 1:
            raise ValueError("speech vocab needs SILENCE plus one phoneme; background needs QUIET")
        if self.acoustic_layers < 1 or self.acoustic_vocab_per_layer < 2:
            raise ValueError("acoustic code needs K >= 1 layers of B >= 2 ids")
        if self.acoustic_vocab_per_layer**self.acoustic_layers < self.semantic_vocab_size:
            raise ValueError("B**K must cover the semantic vocabulary")
        return self


class WorldConfig(_Strict):
    """Parameters of the procedural synthetic world."""

    vocab: VocabSpec = Field(default_factory=VocabSpec)
    semantic_length: int = Field(100, description="Semantic tokens per sample (T_sem)")
    video_length: int = Field(10, description="Video frames per sample (T_v)")
    video_dim: int = Field(16, description="Video feature dimension (D_v)")
    token_rate: float = Field(50.0, description="Informational tokens-per-second label")
    lexicon_size: int = Field(50, description="Number of words in the lexicon")
    min_word_length: int = Field(3, description="Shortest word, in phonemes")
    max_word_length: int = Field(6, description="Longest word, in phonemes")
    min_words: int = Field(0, description="Fewest words per sample")
    max_words: int = Field(3, description="Most words per sample")
    min_word_gap: int = Field(2, description="Minimum SILENCE tokens between words")
    tts_leading_silence: int = Field(5, description="Leading SILENCE of the transcript oracle")
    min_segments: int = Field(1, description="Fewest background segments per sample")
    max_segments: int = Field(4, description="Most background segments per sample")
    video_noise_sigma: float = Field(0.1, description="Gaussian noise on video frames")
    scramble_acoustic: bool = Field(False, description="Permute ids before digit expansion")
    scramble_seed: int = Field(0, description="Seed of the acoustic scrambling permutation")
    master_seed: int = Field(0, description="Seed of the world and of per-sample seeds")

    @property
    def ratio(self) -> int:
        return self.semantic_length // self.video_length

    @model_validator(mode="after")
    def _check_ranges(self) -> Self:
        if self.video_length < 1 or self.semantic_length % self.video_length:
            raise ValueError("semantic_length must be a positive multiple of video_length")
        if not 1 <= self.min_word_length <= self.max_word_length:
            raise ValueError("word length range is empty")
        if not 0 <= self.min_words <= self.max_words:
            raise ValueError("words-per-sample range is empty")
        if not 1 <= self.min_segments <= self.max_segments <= self.video_length:
            raise ValueError("segment range must lie within 1..video_length")
        if self.max_segments > 1 and self.vocab.background_vocab_size < 2:
            raise ValueError("several segments need at least two background ids")
        if self.min_word_gap < 1:
            raise ValueError("words must be separated by at least one SILENCE token")
        span = self.max_words * self.max_word_length + max(0, self.max_words - 1) * self.min_word_gap
        if span > self.semantic_length:
            raise ValueError("the longest utterance does not fit in semantic_length")
        tts_span = span + self.tts_leading_silence
        if self.max_words and tts_span > self.semantic_length:
            raise ValueError("the transcript oracle cannot place the longest utterance")
        phonemes = self.vocab.speech_vocab_size - 1
        if sum(phonemes**n for n in range(self.min_word_length, self.max_word_length + 1)) < self.lexicon_size:
            raise ValueError("not enough distinct phoneme strings for the lexicon")
        if self.video_noise_sigma < 0:
            raise ValueError("video_noise_sigma must be non-negative")
        return self


class ModelConfig(_Strict):
    """Shape of one masked transformer."""

    depth: int = Field(4, description="Number of blocks")
    model_dim: int = Field(64, description="Width of the residual stream")
    heads: int = Field(4, description="Attention heads")
    feedforward_dim: int = Field(256, description="Hidden width of the feedforward sublayer")
    cross_attention_positions: list[int] = Field(
        default_factory=lambda: [3, 4], description="1-based blocks with cross-attention"
    )
    input_vocab_size: int = Field(529, description="Input ids, including the mask id")
    output_vocab_size: int = Field(528, description="Predicted ids")
    max_sequence_length: int = Field(110, description="Longest joint input sequence")
    condition_dropout_prob: float = Field(0.1, description="Training-time condition dropout")
    positional_kind: PositionalKind = Field(PositionalKind.LEARNED, description="Positional encoding")
    init_std: float = Field(0.02, description="Standard deviation of weight initialisation")

    @model_validator(mode="after")
    def _check_shape(self) -> Self:
        if self.depth < 0 or self.model_dim < 1 or self.heads < 1:
            raise ValueError("depth, model_dim and heads must be positive")
        if self.model_dim % self.heads:
            raise ValueError("heads must divide model_dim")
        if sorted(set(self.cross_attention_positions)) != self.cross_attention_positions:
            raise ValueError("cross_attention_positions must be sorted and unique")
        if any(not 1 <= p <= self.depth for p in self.cross_attention_positions):
            raise ValueError("cross_attention_positions must lie within 1..depth")
        if not 0.0 <= self.condition_dropout_prob <= 1.0:
            raise ValueError("condition_dropout_prob must be a probability")
        return self


class OptimizerConfig(_Strict):
    """AdamW hyperparameters with linear warm-up."""

    learning_rate: float = Field(2e-4, description="Base learning rate")
    beta1: float = Field(0.9, description="First-moment decay")
    beta2: float = Field(0.999, description="Second-moment decay")
    eps: float = Field(1e-8, description="Denominator epsilon")
    weight_decay: float = Field(0.01, description="Decoupled weight decay")
    warmup_steps: int = Field(500, description="Linear warm-up length in steps")


class MaskSchedule(_Strict):
    """Masking-ratio schedule gamma(t)."""

    kind: ScheduleKind = Field(ScheduleKind.COSINE, description="Schedule shape")
    epsilon: float = Field(1e-4, description="Floor keeping gamma strictly positive")


class DecodeConfig(_Strict):
    """Iterative parallel decoding settings for one token layer."""

    steps: int = Field(16, description="Decoding iterations")
    cfg_scale: float = Field(5.0, description="Classifier-free guidance scale")
    temperature_start: float = Field(1.0, description="Sampling temperature at the first step")
    temperature_end: float = Field(0.0, description="Sampling temperature at the last step")
    noise_scale: float | None = Field(None, description="Confidence noise scale; None follows temperature")
    logit_clamp: float = Field(30.0, description="Clamp applied to extrapolated guided logits")
    schedule: MaskSchedule = Field(default_factory=MaskSchedule)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.cfg_scale < 0 or self.temperature_start < 0 or self.temperature_end < 0:
            raise ValueError("cfg_scale and temperatures must be non-negative")
        return self


class LayeredDecodeConfig(_Strict):
    """Decoding settings for the coarse-to-fine acoustic layers."""

    steps_per_layer: list[int] = Field(
        default_factory=lambda: [20, 10, 1, 1], description="Decoding iterations per layer"
    )
    cfg_scale: float = Field(2.5, description="Classifier-free guidance scale")
    temperature_start: float = Field(1.0, description="Sampling temperature at the first step")
    temperature_end: float = Field(0.0, description="Sampling temperature at the last step")
    noise_scale: float | None = Field(None, description="Confidence noise scale; None follows temperature")
    logit_clamp: float = Field(30.0, description="Clamp applied to extrapolated guided logits")
    schedule: MaskSchedule = Field(default_factory=MaskSchedule)

    @model_validator(mode="after")
    def _check(self) -> Self:
        if not self.steps_per_layer or min(self.steps_per_layer) < 1:
            raise ValueError("every layer needs at least one decoding step")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be non-negative")
        return self

    def for_layer(self, layer_index: int) -> DecodeConfig:
        """Decode settings of 1-based acoustic layer ``layer_index``."""
        return DecodeConfig(
            steps=self.steps_per_layer[layer_index - 1],
            cfg_scale=self.cfg_scale,
            temperature_start=self.temperature_start,
            temperature_end=self.temperature_end,
            noise_scale=self.noise_scale,
            logit_clamp=self.logit_clamp,
            schedule=self.schedule,
        )


class TrainConfig(_Strict):
    """Training loop settings shared by both stages."""

    batch_size: int = Field(32, description="Examples per step")
    max_steps: int = Field(10000, description="Total optimizer steps")
    log_every: int = Field(50, description="Logging cadence in steps")
    checkpoint_every: int = Field(1000, description="Periodic checkpoint cadence in steps")
    seed: int = Field(0, description="Seed of per-step training randomness")
    num_threads: int = Field(1, description="torch intra-op threads")
    disable_speech_condition: bool = Field(False, description="Drop the V2AS speech memory always")
    progress: bool = Field(False, description="Show a progress bar")


class EvalConfig(_Strict):
    """Metric settings."""

    max_offset: int = Field(25, description="Desync penalty for unmatched onsets, in frames")
    embedder_seed: int = Field(0, description="Seed of the proxy embedders")
    embed_dim: int = Field(16, description="Proxy embedding dimension")
    shrinkage: bool = Field(False, description="Add a diagonal ridge to small-set covariances")
    shrinkage_lambda: float = Field(1e-6, description="Ridge added when shrinkage is on")
    exclude_empty_reference: bool = Field(True, description="Skip empty transcripts in WER aggregates")


class PathsConfig(_Strict):
    """Default locations for artifacts."""

    data_dir: str = Field("data", description="Datasets")
    checkpoint_dir: str = Field("checkpoints", description="Checkpoints and training logs")
    output_dir: str = Field("outputs", description="Generations and reports")


def _v2as_model() -> ModelConfig:
    return ModelConfig()


def _vs2a_model() -> ModelConfig:
    return ModelConfig(cross_attention_positions=[], input_vocab_size=528, output_vocab_size=8)


def _single_model() -> ModelConfig:
    return ModelConfig(cross_attention_positions=[], input_vocab_size=33, output_vocab_size=8)


class RunConfig(_Strict):
    """Complete configuration of a pipeline run."""

    seed: int = Field(0, description="Seed of generation commands")
    world: WorldConfig = Field(default_factory=WorldConfig)
    v2as: ModelConfig = Field(default_factory=_v2as_model)
    vs2a_first: ModelConfig = Field(default_factory=_vs2a_model)
    vs2a_rest: ModelConfig = Field(default_factory=_vs2a_model)
    single_first: ModelConfig = Field(default_factory=_single_model)
    single_rest: ModelConfig = Field(default_factory=_single_model)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    decode_v2as: DecodeConfig = Field(default_factory=DecodeConfig)
    decode_vs2a: LayeredDecodeConfig = Field(default_factory=LayeredDecodeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> Self:
        vocab = self.world.vocab
        joint = self.world.video_length + self.world.semantic_length
        if self.v2as.input_vocab_size != vocab.semantic_vocab_size + 1:
            raise ValueError("v2as.input_vocab_size must be the semantic vocab plus the mask id")
        if self.v2as.output_vocab_size != vocab.semantic_vocab_size:
            raise ValueError("v2as.output_vocab_size must equal the semantic vocab")
        # Acoustic models read semantic ids, or speech ids in the single-stage variant.
        condition_vocab = {
            "vs2a_first": ("semantic", vocab.semantic_vocab_size),
            "vs2a_rest": ("semantic", vocab.semantic_vocab_size),
            "single_first": ("speech", vocab.speech_vocab_size),
            "single_rest": ("speech", vocab.speech_vocab_size),
        }
        for name, (what, size) in condition_vocab.items():
            model: ModelConfig = getattr(self, name)
            if model.input_vocab_size != size:
                raise ValueError(f"{name}.input_vocab_size must equal the {what} vocab")
            if model.output_vocab_size != vocab.acoustic_vocab_per_layer:
                raise ValueError(f"{name}.output_vocab_size must equal the codebook size")
            if model.cross_attention_positions:
                raise ValueError(f"{name} conditions by summation and takes no cross-attention")
        for name in ("v2as", "vs2a_first", "vs2a_rest", "single_first", "single_rest"):
            if getattr(self, name).max_sequence_length < joint:
                raise ValueError(f"{name}.max_sequence_length must cover video plus semantic tokens")
        if len(self.decode_vs2a.steps_per_layer) != vocab.acoustic_layers:
            raise ValueError("decode_vs2a.steps_per_layer needs one entry per acoustic layer")
        return self

    def stage_config(self, stage: Stage) -> "StageConfig":
        """The part of this config a stage checkpoint must agree with."""
        if stage is Stage.V2AS:
            return StageConfig(stage=stage, world=self.world, models={"v2as": self.v2as})
        if stage is Stage.SINGLE:
            return StageConfig(
                stage=stage,
                world=self.world,
                models={"first": self.single_first, "rest": self.single_rest},
            )
        return StageConfig(
            stage=stage,
            world=self.world,
            models={"first": self.vs2a_first, "rest": self.vs2a_rest},
        )


class StageConfig(_Strict):
    """Config stored in, and checked against, a stage checkpoint."""

    stage: Stage = Field(..., description="Stage the checkpoint belongs to")
    world: WorldConfig = Field(..., description="World the stage was trained on")
    models: dict[str, ModelConfig] = Field(..., description="Model shapes by role")


# Responses


class DatasetSummary(BaseModel):
    """Response model for dataset generation."""

    path: str = Field(..., description="Dataset file")
    num_samples: int = Field(..., description="Records written")
    start: int = Field(0, description="Index of the first sample")
    master_seed: int = Field(..., description="World master seed")
    config_hash: str = Field(..., description="Hash of the run config")


class TrainLogRecord(BaseModel):
    """One logged training step."""

    step: int = Field(..., description="Optimizer steps completed")
    loss: float = Field(..., description="Training loss")
    learning_rate: float = Field(..., description="Learning rate used by the step")
    masked_accuracy: float = Field(..., description="Accuracy over masked positions")
    speech_accuracy: float | None = Field(None, description="Speech-component accuracy (v2as)")
    background_accuracy: float | None = Field(None, description="Background-component accuracy (v2as)")
    layer_losses: list[float] | None = Field(None, description="Per-layer losses (vs2a)")
    layer_accuracies: list[float] | None = Field(None, description="Per-layer accuracies (vs2a)")
    degenerate: bool = Field(False, description="No position was masked")


class TrainSummary(BaseModel):
    """Response model for a training run."""

    stage: Stage = Field(..., description="Trained stage")
    steps: int = Field(..., description="Optimizer steps completed")
    final_loss: float | None = Field(None, description="Loss of the last step run")
    checkpoint: str = Field(..., description="Final checkpoint")
    log_path: str = Field(..., description="JSON-lines training log")
    resumed_from_step: int = Field(0, description="Step the run resumed from")


class GenerationSummary(BaseModel):
    """Response model for two-stage generation."""

    path: str = Field(..., description="Generated token file")
    num_outputs: int = Field(..., description="Generated records")
    mode: GenerateMode = Field(..., description="Speech condition source")
    seed: int = Field(..., description="Generation seed")
    non_image_columns: int = Field(
        0, description="Single-stage grid columns outside the semantic vocabulary, stored as id 0"
    )


class MetricRecord(BaseModel):
    """One evaluation metric."""

    name: str = Field(..., description="Metric name")
    value: float = Field(..., description="Metric value")
    sample_count: int = Field(..., description="Samples aggregated")
    embedder_id: str | None = Field(None, description="Embedder used, for embedding metrics")
    config_hash: str = Field(..., description="Hash of the run config")


class EvalReport(BaseModel):
    """Response model for evaluation."""

    metrics: list[MetricRecord] = Field(..., description="Computed metrics")
    flagged_empty_references: int = Field(0, description="Samples with empty reference transcripts")

    def metric(self, name: str) -> MetricRecord:
        """Look up a metric by name."""
        for record in self.metrics:
            if record.name == name:
                return record
        raise KeyError(name)
