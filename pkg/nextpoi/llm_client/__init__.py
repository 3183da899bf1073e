"""Chat backends: the live OpenAI-compatible client, a response cache and mock policies"""
