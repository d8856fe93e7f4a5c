# Integration tests