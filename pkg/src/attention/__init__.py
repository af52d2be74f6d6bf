from src.attention.attention import AttentionBlock, AttentionResult, cross_attention, self_attention
