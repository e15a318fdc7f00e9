#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rsid/common.hpp"

namespace rsid {

/// Ordered field layout of an item table. Field 0 is always the item-ID
/// field, so its vocabulary size equals the item count.
struct FieldSchema {
  std::vector<std::string> field_names;
  std::vector<std::size_t> vocab_sizes;

  std::size_t field_count() const { return field_names.size(); }
};

/// N items, each a row of J integer field values (indices into per-field
/// vocabularies interned in first-seen order). Read-only after load.
struct ItemTable {
  FieldSchema schema;
  std::size_t item_count = 0;
  std::vector<std::int32_t> values;  // item_count x J, row-major

  /// Per field: index -> original token.
  std::vector<std::vector<std::string>> vocab_tokens;

  std::int32_t field_value(std::size_t item, std::size_t field) const {
    return values[item * schema.field_count() + field];
  }
  std::span<const std::int32_t> row(std::size_t item) const {
    return {values.data() + item * schema.field_count(), schema.field_count()};
  }
  const std::string& item_token(std::size_t item) const {
    return vocab_tokens[0][item];
  }
  /// Item index for an item-ID token, or -1.
  std::int32_t find_item(const std::string& token) const;

  std::unordered_map<std::string, std::int32_t> item_index;
};

/// Load a TSV item file: one item per line, J tab-separated tokens, column 0
/// being the item ID. Tokens are interned per field in first-seen order.
/// If field_names is empty, names are derived from the column count.
ItemTable load_items(const std::string& path,
                     std::vector<std::string> field_names = {});

/// Per-user chronologically ordered item-index sequences.
struct SequenceStore {
  std::vector<std::string> user_tokens;
  std::vector<std::vector<std::int32_t>> sequences;
  std::size_t max_len = 32;  // window length used by enumerate_windows
};

/// Load sequences: each line is "user<TAB>item item item ..." with item-ID
/// tokens resolved against the table. Unknown tokens and empty lines are
/// rejected.
SequenceStore load_sequences(const std::string& path, const ItemTable& items,
                             std::size_t max_len = 32);

/// Flattened set of (history, target) prediction windows.
struct WindowSet {
  std::vector<std::int32_t> history;     // flattened histories
  std::vector<std::size_t> offsets;      // count()+1 offsets into history
  std::vector<std::int32_t> targets;     // target item per window

  std::size_t count() const { return targets.size(); }
  std::span<const std::int32_t> history_of(std::size_t w) const {
    return {history.data() + offsets[w],
            offsets[w + 1] - offsets[w]};
  }
};

/// Enumerate prediction windows with a sliding window of length
/// store.max_len. Target positions are anchored at the sequence end and
/// walk backwards by `stride`; with stride 1 every position >= 2 is a
/// target exactly once (T-1 windows for a length-T sequence). History is
/// the up-to (max_len - 1) items preceding the target.
WindowSet enumerate_windows(const SequenceStore& store, std::size_t stride = 1);

/// Leave-one-out split: per user, the last item is the test target, the
/// second-to-last the validation target, and training windows cover target
/// positions 2..T-2.
struct SplitWindows {
  WindowSet train;
  WindowSet valid;
  WindowSet test;
};
SplitWindows leave_one_out_split(const SequenceStore& store,
                                 std::size_t stride = 1);

/// Dense row-major float32 item representations.
struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> values;
  std::vector<std::string> row_tokens;  // row -> item token

  std::span<const float> row(std::size_t r) const {
    return {values.data() + r * dim, dim};
  }
};

/// Binary "RSID" container: magic, version(u32), N(u32), D(u32)
/// little-endian, N*D float32 little-endian, then a UTF-8 JSON trailer with
/// the row -> item token map. Round-trips are bit-exact.
void write_embeddings(const EmbeddingMatrix& m, const std::string& path);
EmbeddingMatrix read_embeddings(const std::string& path);

}  // namespace rsid
