from src.text.text_sim import (
    HARD_PROMPT_TEMPLATE,
    LabelVocabulary,
    PseudoTextEncoder,
    SoftPromptBank,
    TokenEmbeddingTable,
    build_hard_prompts,
    build_name_embeddings,
    build_soft_prompts,
    encode_sequence,
    encode_with_prompts,
    tokenize,
)
