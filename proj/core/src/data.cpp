#include "rsid/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rsid {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> split_spaces(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

std::int32_t ItemTable::find_item(const std::string& token) const {
  const auto it = item_index.find(token);
  return it == item_index.end() ? -1 : it->second;
}

ItemTable load_items(const std::string& path,
                     std::vector<std::string> field_names) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open item file: " + path);

  ItemTable table;
  std::vector<std::unordered_map<std::string, std::int32_t>> interners;
  std::string line;
  std::size_t line_no = 0;
  std::size_t fields = 0;

  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    if (fields == 0) {
      fields = cols.size();
      if (field_names.empty()) {
        field_names.resize(fields);
        field_names[0] = "item_id";
        for (std::size_t k = 1; k < fields; ++k)
          field_names[k] = "field_" + std::to_string(k);
      } else if (field_names.size() != fields) {
        throw Error(path + ": expected " + std::to_string(field_names.size()) +
                    " columns per the field names, found " +
                    std::to_string(fields) + " at line " +
                    std::to_string(line_no));
      }
      interners.resize(fields);
      table.vocab_tokens.resize(fields);
    } else if (cols.size() != fields) {
      throw Error(path + ": line " + std::to_string(line_no) + " has " +
                  std::to_string(cols.size()) + " columns, expected " +
                  std::to_string(fields));
    }
    for (std::size_t k = 0; k < fields; ++k) {
      auto& interner = interners[k];
      const auto it = interner.find(cols[k]);
      std::int32_t idx;
      if (it == interner.end()) {
        idx = static_cast<std::int32_t>(table.vocab_tokens[k].size());
        interner.emplace(cols[k], idx);
        table.vocab_tokens[k].push_back(cols[k]);
      } else {
        if (k == 0)
          throw Error(path + ": duplicate item-ID token '" + cols[0] +
                      "' at line " + std::to_string(line_no));
        idx = it->second;
      }
      table.values.push_back(idx);
    }
    ++table.item_count;
  }
  if (table.item_count == 0) throw Error(path + ": no items");

  table.schema.field_names = std::move(field_names);
  table.schema.vocab_sizes.resize(fields);
  for (std::size_t k = 0; k < fields; ++k)
    table.schema.vocab_sizes[k] = table.vocab_tokens[k].size();
  table.item_index = std::move(interners[0]);
  return table;
}

SequenceStore load_sequences(const std::string& path, const ItemTable& items,
                             std::size_t max_len) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open sequence file: " + path);
  if (max_len < 2) throw Error("max_len must be >= 2");

  SequenceStore store;
  store.max_len = max_len;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error(path + ": line " + std::to_string(line_no) +
                  " is missing the user<TAB>items separator");
    const std::string user = line.substr(0, tab);
    const auto tokens = split_spaces(line.substr(tab + 1));
    if (tokens.empty())
      throw Error(path + ": empty sequence for user '" + user + "' at line " +
                  std::to_string(line_no));
    std::vector<std::int32_t> seq;
    seq.reserve(tokens.size());
    for (const auto& tok : tokens) {
      const std::int32_t idx = items.find_item(tok);
      if (idx < 0)
        throw Error(path + ": unknown item token '" + tok + "' at line " +
                    std::to_string(line_no));
      seq.push_back(idx);
    }
    store.user_tokens.push_back(user);
    store.sequences.push_back(std::move(seq));
  }
  return store;
}

namespace {

void push_window(WindowSet& out, const std::vector<std::int32_t>& seq,
                 std::size_t target_pos, std::size_t max_len) {
  // target_pos is 1-based; history = up to max_len-1 preceding items.
  const std::size_t hist_len =
      std::min(target_pos - 1, max_len > 0 ? max_len - 1 : target_pos - 1);
  const std::size_t begin = target_pos - 1 - hist_len;
  for (std::size_t i = begin; i + 1 < target_pos; ++i)
    out.history.push_back(seq[i]);
  out.offsets.push_back(out.history.size());
  out.targets.push_back(seq[target_pos - 1]);
}

WindowSet make_window_set() {
  WindowSet w;
  w.offsets.push_back(0);
  return w;
}

}  // namespace

WindowSet enumerate_windows(const SequenceStore& store, std::size_t stride) {
  if (stride == 0) throw Error("stride must be >= 1");
  WindowSet out = make_window_set();
  for (const auto& seq : store.sequences) {
    const std::size_t n = seq.size();
    if (n < 2) continue;
    // Anchor at the end so the most recent target always appears.
    std::vector<std::size_t> positions;
    for (std::size_t t = n; t >= 2; t -= stride) {
      positions.push_back(t);
      if (t < 2 + stride) break;
    }
    for (auto it = positions.rbegin(); it != positions.rend(); ++it)
      push_window(out, seq, *it, store.max_len);
  }
  return out;
}

SplitWindows leave_one_out_split(const SequenceStore& store,
                                 std::size_t stride) {
  if (stride == 0) throw Error("stride must be >= 1");
  SplitWindows split;
  split.train = make_window_set();
  split.valid = make_window_set();
  split.test = make_window_set();
  for (const auto& seq : store.sequences) {
    const std::size_t n = seq.size();
    if (n < 2) continue;
    push_window(split.test, seq, n, store.max_len);
    if (n >= 3) push_window(split.valid, seq, n - 1, store.max_len);
    if (n >= 4) {
      std::vector<std::size_t> positions;
      for (std::size_t t = n - 2; t >= 2; t -= stride) {
        positions.push_back(t);
        if (t < 2 + stride) break;
      }
      for (auto it = positions.rbegin(); it != positions.rend(); ++it)
        push_window(split.train, seq, *it, store.max_len);
    }
  }
  return split;
}

namespace {

constexpr char kMagic[4] = {'R', 'S', 'I', 'D'};
constexpr std::uint32_t kEmbeddingVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw Error("truncated payload reading " + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_embeddings(const EmbeddingMatrix& m, const std::string& path) {
  if (m.values.size() != m.rows * m.dim)
    throw Error("embedding matrix size mismatch");
  if (m.rows > UINT32_MAX || m.dim > UINT32_MAX ||
      (m.dim != 0 && m.rows > SIZE_MAX / 4 / std::max<std::size_t>(m.dim, 1)))
    throw Error("embedding matrix dimensions overflow the container format");
  for (const float v : m.values)
    if (!std::isfinite(v)) throw Error("embedding matrix has non-finite values");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);
  out.write(kMagic, 4);
  put_u32(out, kEmbeddingVersion);
  put_u32(out, static_cast<std::uint32_t>(m.rows));
  put_u32(out, static_cast<std::uint32_t>(m.dim));
  // float32 little-endian payload; on this target a raw write is exact.
  static_assert(sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size() * 4));

  nlohmann::json trailer = nlohmann::json::array();
  for (const auto& tok : m.row_tokens) trailer.push_back(tok);
  const std::string text = trailer.dump();
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed: " + path);
}

EmbeddingMatrix read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw Error(path + ": bad magic");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kEmbeddingVersion)
    throw Error(path + ": unsupported version " + std::to_string(version));
  EmbeddingMatrix m;
  m.rows = get_u32(in, "row count");
  m.dim = get_u32(in, "dimension");
  const std::uint64_t count =
      static_cast<std::uint64_t>(m.rows) * static_cast<std::uint64_t>(m.dim);
  if (count > SIZE_MAX / 4) throw Error(path + ": N*D overflows");
  m.values.resize(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(m.values.data()),
          static_cast<std::streamsize>(count * 4));
  if (static_cast<std::uint64_t>(in.gcount()) != count * 4)
    throw Error(path + ": truncated payload (expected " +
                std::to_string(count * 4) + " value bytes)");

  std::string trailer((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  if (!trailer.empty()) {
    nlohmann::json j = nlohmann::json::parse(trailer, nullptr, false);
    if (j.is_discarded() || !j.is_array())
      throw Error(path + ": malformed JSON trailer");
    if (j.size() != m.rows)
      throw Error(path + ": trailer maps " + std::to_string(j.size()) +
                  " rows, expected " + std::to_string(m.rows));
    for (const auto& t : j) m.row_tokens.push_back(t.get<std::string>());
  }
  return m;
}

}  // namespace rsid
