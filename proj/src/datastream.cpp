#include "streamrec/datastream.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace streamrec {

using nlohmann::json;

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

bool parse_int(const std::string& s, std::int64_t& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
        out = std::stoll(s, &pos);
    } catch (...) {
        return false;
    }
    return pos == s.size();
}

} // namespace

IngestResult ingest_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::Config, "cannot open input file: " + path);

    IngestResult result;
    std::unordered_map<std::string, std::int64_t> user_ids, item_ids;
    std::string line;
    std::size_t line_no = 0;
    bool saw_data = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_fields(line);
        if (fields.size() != 3) {
            if (line_no == 1) continue; // tolerate a header row
            raise(ErrorCode::Parse,
                  "parse error at line " + std::to_string(line_no) +
                      ": expected user,item,timestamp");
        }
        std::int64_t ts;
        if (!parse_int(fields[2], ts)) {
            if (line_no == 1) continue; // header with 3 columns
            raise(ErrorCode::Parse, "parse error at line " + std::to_string(line_no) +
                                        ": bad timestamp '" + fields[2] + "'");
        }
        if (ts < 0)
            raise(ErrorCode::Parse, "parse error at line " + std::to_string(line_no) +
                                        ": negative timestamp");
        auto intern = [](std::unordered_map<std::string, std::int64_t>& table,
                         std::vector<std::string>& names, const std::string& key) {
            auto it = table.find(key);
            if (it != table.end()) return it->second;
            const std::int64_t id = static_cast<std::int64_t>(table.size());
            table.emplace(key, id);
            names.push_back(key);
            return id;
        };
        Interaction rec;
        rec.user_id = intern(user_ids, result.user_names, fields[0]);
        rec.item_id = intern(item_ids, result.item_names, fields[1]);
        rec.timestamp = ts;
        result.interactions.push_back(rec);
        saw_data = true;
    }
    if (!saw_data) raise(ErrorCode::EmptyInput, "empty input: " + path);
    result.n_users = user_ids.size();
    result.n_items = item_ids.size();
    std::stable_sort(result.interactions.begin(), result.interactions.end(),
                     [](const Interaction& a, const Interaction& b) {
                         if (a.user_id != b.user_id) return a.user_id < b.user_id;
                         return a.timestamp < b.timestamp;
                     });
    return result;
}

namespace {

std::vector<DataBlock> build_blocks(const std::vector<Interaction>& interactions,
                                    const std::vector<int>& assignment, int T) {
    std::vector<DataBlock> blocks(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) blocks[static_cast<std::size_t>(t)].index = t + 1;

    // Per-block interactions, stably ordered by (timestamp, input order)
    // within each user.
    std::vector<std::vector<Interaction>> per_block(static_cast<std::size_t>(T));
    for (std::size_t i = 0; i < interactions.size(); ++i)
        per_block[static_cast<std::size_t>(assignment[i])].push_back(interactions[i]);

    std::set<std::int64_t> seen_users, cumulative_items;
    for (int t = 0; t < T; ++t) {
        DataBlock& block = blocks[static_cast<std::size_t>(t)];
        auto& recs = per_block[static_cast<std::size_t>(t)];
        std::stable_sort(recs.begin(), recs.end(),
                         [](const Interaction& a, const Interaction& b) {
                             if (a.user_id != b.user_id) return a.user_id < b.user_id;
                             return a.timestamp < b.timestamp;
                         });
        for (const Interaction& rec : recs) {
            UserSequence& seq = block.sequences[rec.user_id];
            seq.user_id = rec.user_id;
            seq.block_index = block.index;
            seq.items.push_back(rec.item_id);
            block.users.insert(rec.user_id);
            block.items.insert(rec.item_id);
            ++block.n_interactions;
        }
        cumulative_items.insert(block.items.begin(), block.items.end());
        block.cumulative_items = cumulative_items;
        for (std::int64_t u : block.users)
            if (!seen_users.count(u)) block.new_users.insert(u);
        seen_users.insert(block.users.begin(), block.users.end());
    }
    return blocks;
}

} // namespace

std::vector<DataBlock> split_blocks(const std::vector<Interaction>& interactions,
                                    int num_blocks) {
    if (num_blocks < 1) raise(ErrorCode::Config, "split_blocks: num_blocks must be >= 1");
    if (interactions.empty()) raise(ErrorCode::EmptyInput, "split_blocks: no interactions");
    std::int64_t lo = interactions[0].timestamp, hi = lo;
    for (const Interaction& r : interactions) {
        lo = std::min(lo, r.timestamp);
        hi = std::max(hi, r.timestamp);
    }
    const std::int64_t span = hi - lo + 1;
    if (static_cast<std::int64_t>(num_blocks) > span)
        raise(ErrorCode::Config, "split_blocks: " + std::to_string(num_blocks) +
                                     " blocks exceed timestamp span " +
                                     std::to_string(span));
    std::vector<int> assignment(interactions.size());
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        // Uniform partition of [lo, hi+1) into num_blocks spans.
        const std::int64_t off = interactions[i].timestamp - lo;
        int t = static_cast<int>((off * num_blocks) / span);
        assignment[i] = std::min(t, num_blocks - 1);
    }
    return build_blocks(interactions, assignment, num_blocks);
}

std::vector<DataBlock> split_blocks(const std::vector<Interaction>& interactions,
                                    const std::vector<std::int64_t>& boundaries) {
    if (interactions.empty()) raise(ErrorCode::EmptyInput, "split_blocks: no interactions");
    for (std::size_t i = 1; i < boundaries.size(); ++i)
        if (boundaries[i] <= boundaries[i - 1])
            raise(ErrorCode::Config, "split_blocks: boundaries must be strictly increasing");
    const int T = static_cast<int>(boundaries.size()) + 1;
    std::vector<int> assignment(interactions.size());
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const std::int64_t ts = interactions[i].timestamp;
        int t = 0;
        while (t < static_cast<int>(boundaries.size()) &&
               ts >= boundaries[static_cast<std::size_t>(t)])
            ++t;
        assignment[i] = t;
    }
    return build_blocks(interactions, assignment, T);
}

std::vector<std::vector<std::int64_t>> sample_negatives(const UserSequence& seq,
                                                        const std::set<std::int64_t>& pool,
                                                        int n_neg, Rng& rng) {
    if (n_neg < 1) raise(ErrorCode::Usage, "sample_negatives: n_neg must be >= 1");
    std::set<std::int64_t> own(seq.items.begin(), seq.items.end());
    std::vector<std::int64_t> candidates;
    candidates.reserve(pool.size());
    for (std::int64_t item : pool)
        if (!own.count(item)) candidates.push_back(item);
    if (candidates.size() < static_cast<std::size_t>(n_neg))
        raise(ErrorCode::Sampling, "sample_negatives: pool exhausted (" +
                                       std::to_string(candidates.size()) +
                                       " candidates, need " + std::to_string(n_neg) + ")");
    const std::size_t positions = seq.items.size() > 0 ? seq.items.size() - 1 : 0;
    std::vector<std::vector<std::int64_t>> out(positions);
    for (auto& negs : out) {
        negs.reserve(static_cast<std::size_t>(n_neg));
        std::set<std::size_t> used;
        while (negs.size() < static_cast<std::size_t>(n_neg)) {
            const std::size_t idx =
                static_cast<std::size_t>(rng.bounded(candidates.size()));
            if (used.insert(idx).second) negs.push_back(candidates[idx]);
        }
    }
    return out;
}

BlockSplit leave_one_out(const DataBlock& block) {
    BlockSplit split;
    for (const auto& [user, seq] : block.sequences) {
        if (seq.items.size() < 2) {
            ++split.excluded_short;
            continue;
        }
        UserSequence train = seq;
        train.items.pop_back();
        split.targets[user] = seq.items.back();
        split.train.emplace(user, std::move(train));
    }
    return split;
}

std::vector<DataBlock> generate_synthetic_stream(const SyntheticConfig& cfg) {
    if (cfg.n_users < 1 || cfg.n_items < 1 || cfg.n_blocks < 1 || cfg.n_clusters < 1)
        raise(ErrorCode::Config, "synthetic stream: counts must be positive");
    if (cfg.drift_rate < 0 || cfg.drift_rate > 1 || cfg.new_user_rate < 0 ||
        cfg.new_user_rate > 1)
        raise(ErrorCode::Config, "synthetic stream: rates must be in [0, 1]");
    if (cfg.len_min < 1 || cfg.len_max < cfg.len_min)
        raise(ErrorCode::Config, "synthetic stream: bad length range");

    Rng rng(cfg.seed);
    const auto drift_ppm = static_cast<std::uint32_t>(std::llround(cfg.drift_rate * 1e6));
    const int joins_per_block =
        static_cast<int>(std::ceil(cfg.new_user_rate * cfg.n_users));

    struct UserState {
        int cluster = 0;
        bool heavy = false;
        bool hyper = false;
    };
    std::vector<UserState> users;
    auto add_user = [&](bool hyper) {
        UserState u;
        u.cluster = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(cfg.n_clusters)));
        u.heavy = rng.chance_ppm(cfg.heavy_user_ppm);
        u.hyper = hyper;
        users.push_back(u);
    };
    for (int i = 0; i < cfg.n_users; ++i) add_user(i < cfg.n_hyperactive);

    const std::int64_t block_span = 1000000;
    std::vector<Interaction> interactions;

    for (int t = 0; t < cfg.n_blocks; ++t) {
        if (t > 0) {
            for (auto& u : users)
                if (drift_ppm > 0 && rng.chance_ppm(drift_ppm))
                    u.cluster = static_cast<int>(
                        rng.bounded(static_cast<std::uint64_t>(cfg.n_clusters)));
            for (int j = 0; j < joins_per_block; ++j) add_user(false);
        }
        for (std::size_t uid = 0; uid < users.size(); ++uid) {
            const UserState& u = users[uid];
            const bool is_new_this_block =
                t > 0 && uid >= static_cast<std::size_t>(
                                    cfg.n_users + (t - 1) * joins_per_block);
            // Everyone appears in the first block and joiners always appear
            // in their joining block; otherwise users skip a block with
            // probability 1 - activity.
            const bool must_appear = (t == 0) || is_new_this_block;
            if (!must_appear && !rng.chance_ppm(cfg.activity_ppm)) continue;
            std::int64_t len = cfg.len_min +
                               static_cast<std::int64_t>(rng.bounded(
                                   static_cast<std::uint64_t>(cfg.len_max - cfg.len_min + 1)));
            if (u.heavy) len *= cfg.heavy_mult;
            if (u.hyper) len *= cfg.hyperactive_mult;
            const std::int64_t cluster_size =
                std::max<std::int64_t>(1, cfg.n_items / cfg.n_clusters);
            const std::int64_t cluster_base = u.cluster * cluster_size;
            for (std::int64_t p = 0; p < len; ++p) {
                std::int64_t item;
                if (rng.chance_ppm(cfg.cluster_focus_ppm)) {
                    item = cluster_base +
                           static_cast<std::int64_t>(rng.bounded(
                               static_cast<std::uint64_t>(cluster_size)));
                } else {
                    item = static_cast<std::int64_t>(
                        rng.bounded(static_cast<std::uint64_t>(cfg.n_items)));
                }
                Interaction rec;
                rec.user_id = static_cast<std::int64_t>(uid);
                rec.item_id = item;
                rec.timestamp = static_cast<std::int64_t>(t) * block_span + p;
                interactions.push_back(rec);
            }
        }
    }
    std::vector<std::int64_t> boundaries;
    for (int t = 1; t < cfg.n_blocks; ++t)
        boundaries.push_back(static_cast<std::int64_t>(t) * block_span);
    if (boundaries.empty()) return split_blocks(interactions, 1);
    return split_blocks(interactions, boundaries);
}

std::string block_manifest_json(const std::vector<DataBlock>& blocks) {
    json manifest = json::array();
    for (const DataBlock& b : blocks) {
        manifest.push_back({{"t", b.index},
                            {"n_users", b.users.size()},
                            {"n_items", b.items.size()},
                            {"n_cumulative_items", b.cumulative_items.size()},
                            {"n_interactions", b.n_interactions},
                            {"n_new_users", b.new_users.size()}});
    }
    return manifest.dump(2);
}

void save_blocks(const std::vector<DataBlock>& blocks, const std::string& dir) {
    std::filesystem::create_directories(dir);
    json root = json::array();
    for (const DataBlock& b : blocks) {
        json jb;
        jb["index"] = b.index;
        json seqs = json::object();
        for (const auto& [user, seq] : b.sequences)
            seqs[std::to_string(user)] = seq.items;
        jb["sequences"] = std::move(seqs);
        root.push_back(std::move(jb));
    }
    {
        std::ofstream out(dir + "/blocks.json");
        if (!out) raise(ErrorCode::Io, "cannot write blocks to " + dir);
        out << root.dump();
    }
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) raise(ErrorCode::Io, "cannot write manifest to " + dir);
    mf << block_manifest_json(blocks);
}

std::vector<DataBlock> load_blocks(const std::string& dir) {
    std::ifstream in(dir + "/blocks.json");
    if (!in) raise(ErrorCode::Config, "cannot open blocks file in " + dir);
    json root;
    try {
        in >> root;
    } catch (const std::exception& e) {
        raise(ErrorCode::Parse, std::string("bad blocks file: ") + e.what());
    }
    std::vector<DataBlock> blocks;
    std::set<std::int64_t> seen_users, cumulative_items;
    for (const auto& jb : root) {
        DataBlock b;
        b.index = jb.at("index").get<int>();
        for (const auto& [key, items] : jb.at("sequences").items()) {
            UserSequence seq;
            seq.user_id = std::stoll(key);
            seq.block_index = b.index;
            seq.items = items.get<std::vector<std::int64_t>>();
            b.users.insert(seq.user_id);
            for (std::int64_t item : seq.items) b.items.insert(item);
            b.n_interactions += seq.items.size();
            b.sequences.emplace(seq.user_id, std::move(seq));
        }
        cumulative_items.insert(b.items.begin(), b.items.end());
        b.cumulative_items = cumulative_items;
        for (std::int64_t u : b.users)
            if (!seen_users.count(u)) b.new_users.insert(u);
        seen_users.insert(b.users.begin(), b.users.end());
        blocks.push_back(std::move(b));
    }
    if (blocks.empty()) raise(ErrorCode::EmptyInput, "no blocks in " + dir);
    return blocks;
}

} // namespace streamrec
