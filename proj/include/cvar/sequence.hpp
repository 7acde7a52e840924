#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cvar/graph.hpp"
#include "cvar/tokenizer.hpp"

namespace cvar {

// Flattened joint sequence: [CLS],[TYP] prefix, then per scale the control
// block followed by the image block.
struct PositionInfo {
    int scale = -1;   // 0-based scale index, -1 for the prefix
    int stream = -1;  // 0 control, 1 image, -1 prefix
    int cell = 0;     // row-major cell inside the scale grid
};

constexpr int kStreamControl = 0;
constexpr int kStreamImage = 1;

struct SequenceLayout {
    ScaleSchedule sched;
    int prefix_len = 2;
    int seq_len = 0;
    std::vector<PositionInfo> pos;
    std::vector<int> ctrl_begin;  // per scale
    std::vector<int> img_begin;

    static SequenceLayout build(const ScaleSchedule& sched) {
        SequenceLayout l;
        l.sched = sched;
        l.seq_len = 2 + 2 * sched.positions();
        l.pos.resize(static_cast<size_t>(l.seq_len));
        int at = 2;
        for (int t = 0; t < sched.count(); ++t) {
            l.ctrl_begin.push_back(at);
            for (int c = 0; c < sched.cells(t); ++c) l.pos[static_cast<size_t>(at++)] = {t, kStreamControl, c};
            l.img_begin.push_back(at);
            for (int c = 0; c < sched.cells(t); ++c) l.pos[static_cast<size_t>(at++)] = {t, kStreamImage, c};
        }
        return l;
    }

    int scale_begin(int t) const { return ctrl_begin[static_cast<size_t>(t)]; }
    int scale_end(int t) const { return img_begin[static_cast<size_t>(t)] + sched.cells(t); }

    // rows present when scales [0, upto) are in play
    int rows_upto(int upto) const { return upto == 0 ? prefix_len : scale_end(upto - 1); }

    // Prefix block plus one block per scale; full attention inside a scale
    // block (both streams), nothing beyond it.
    std::vector<AttnBlock> attention_blocks(int upto_scales) const {
        std::vector<AttnBlock> blocks{{0, prefix_len, prefix_len}};
        for (int t = 0; t < upto_scales; ++t) blocks.push_back({scale_begin(t), scale_end(t), scale_end(t)});
        return blocks;
    }

    std::vector<int> ctrl_rows(int upto_scales) const {
        std::vector<int> out;
        for (int t = 0; t < upto_scales; ++t) {
            for (int c = 0; c < sched.cells(t); ++c) out.push_back(ctrl_begin[static_cast<size_t>(t)] + c);
        }
        return out;
    }

    std::vector<int> img_rows(int upto_scales) const {
        std::vector<int> out;
        for (int t = 0; t < upto_scales; ++t) {
            for (int c = 0; c < sched.cells(t); ++c) out.push_back(img_begin[static_cast<size_t>(t)] + c);
        }
        return out;
    }
};

// Dense boolean attention mask, kept for inspection and tests; the forward
// pass consumes the equivalent AttnBlock runs.
struct AttentionMask {
    int n = 0;
    std::vector<uint8_t> allow;  // n*n, query-major

    bool at(int q, int k) const { return allow[static_cast<size_t>(q) * n + k] != 0; }
};

inline AttentionMask build_attention_mask(const SequenceLayout& layout) {
    AttentionMask m;
    m.n = layout.seq_len;
    m.allow.assign(static_cast<size_t>(m.n) * m.n, 0);
    const auto blocks = layout.attention_blocks(layout.sched.count());
    for (const AttnBlock& b : blocks) {
        for (int q = b.row_begin; q < b.row_end; ++q) {
            for (int k = 0; k < b.attend_end; ++k) m.allow[static_cast<size_t>(q) * m.n + k] = 1;
        }
    }
    return m;
}

inline AttentionMask full_attention_mask(int n) {
    AttentionMask m;
    m.n = n;
    m.allow.assign(static_cast<size_t>(n) * n, 1);
    return m;
}

// Converts a boolean mask back into block runs; requires each row to attend
// a contiguous prefix [0, limit) and rows with equal limits to be contiguous
// with limit >= run end (the shape every supported mask has).
inline std::vector<AttnBlock> attention_blocks_from_mask(const AttentionMask& m, int rows) {
    std::vector<int> limits(static_cast<size_t>(rows));
    for (int q = 0; q < rows; ++q) {
        int lim = 0;
        while (lim < m.n && m.at(q, lim)) ++lim;
        for (int k = lim; k < m.n; ++k) {
            if (m.at(q, k)) throw std::invalid_argument("attention mask: row is not a contiguous prefix");
        }
        if (lim < 1) throw std::invalid_argument("attention mask: empty row");
        limits[static_cast<size_t>(q)] = std::min(lim, rows);
    }
    std::vector<AttnBlock> blocks;
    int begin = 0;
    for (int q = 1; q <= rows; ++q) {
        if (q == rows || limits[static_cast<size_t>(q)] != limits[static_cast<size_t>(begin)]) {
            blocks.push_back({begin, q, limits[static_cast<size_t>(begin)]});
            begin = q;
        }
    }
    for (const AttnBlock& b : blocks) {
        if (b.attend_end < b.row_end) throw std::invalid_argument("attention mask: run attends less than itself");
    }
    return blocks;
}

}  // namespace cvar
