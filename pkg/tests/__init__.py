# Tests for slotpolicy
