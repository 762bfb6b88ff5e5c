#include "tbnet/split_runtime.hpp"

#include <algorithm>

#include "tbnet/ops.hpp"

namespace tbnet {

AuditResult audit_check(const AuditLog& log, int64_t expected_merge_messages) {
    AuditResult result;
    int64_t user_outputs = 0;
    int64_t merge_messages = 0;
    for (const AuditRecord& r : log.records()) {
        if (r.direction == Direction::TeeToRee && r.tensor_payload)
            result.violations.push_back(
                {r.ordinal, strcat_msg("record ", r.ordinal, ": tensor payload crossed tee->ree (",
                                       r.bytes, " bytes, merge point ", r.merge_point, ")")});
        if (r.direction == Direction::TeeToUser) ++user_outputs;
        if (r.direction == Direction::ReeToTee) ++merge_messages;
    }
    if (user_outputs != 1)
        result.violations.push_back(
            {-1, strcat_msg("expected exactly one user-output record, found ", user_outputs)});
    if (merge_messages != expected_merge_messages)
        result.violations.push_back(
            {-1, strcat_msg("expected ", expected_merge_messages, " merge messages, found ",
                            merge_messages)});
    result.pass = result.violations.empty();
    return result;
}

ReeContext::ReeContext(const std::string& ree_file) : graph_(load_ree(ree_file)) {}

std::vector<Message> ReeContext::run(const TensorPtr<float>& x,
                                     const std::vector<int64_t>& send_layers) const {
    NoGradGuard guard;
    std::vector<TensorPtr<float>> trace;
    forward_single(graph_, x, Mode::Eval, &trace);
    std::vector<Message> out;
    out.reserve(send_layers.size());
    for (size_t i = 0; i < send_layers.size(); ++i) {
        const int64_t layer = send_layers[i];
        if (layer < 0 || layer >= static_cast<int64_t>(trace.size()))
            throw ProtocolError(strcat_msg("transmission schedule names layer ", layer,
                                           " outside the chain"));
        Message m;
        m.sequence = static_cast<int64_t>(i);
        m.merge_point = static_cast<int64_t>(i);
        m.shape = trace[layer]->shape;
        m.payload = trace[layer]->data;
        out.push_back(std::move(m));
    }
    return out;
}

TeeContext::TeeContext(const std::string& tee_file) : bundle_(load_tee(tee_file)) {}

TeeContext::Output TeeContext::run(const TensorPtr<float>& x,
                                   const std::vector<Message>& inbox) const {
    NoGradGuard guard;
    const BranchGraph<float>& g = bundle_.graph;
    if (x->rank() != 4 || x->dim(0) != 1)
        throw ShapeError(strcat_msg("split inference takes one input at a time, got ",
                                    shape_to_string(x->shape)));

    std::vector<size_t> merge_for_layer(g.layers.size(), SIZE_MAX);
    for (size_t m = 0; m < bundle_.merge_points.size(); ++m)
        merge_for_layer[bundle_.merge_points[m].dst_layer] = m;

    size_t next_msg = 0;
    std::vector<TensorPtr<float>> outputs;
    outputs.reserve(g.layers.size());
    TensorPtr<float> cur = x;
    for (size_t i = 0; i < g.layers.size(); ++i) {
        const LayerSpec& l = g.layers[i];
        const LayerParams<float>& p = g.params[i];
        switch (l.kind) {
            case LayerKind::ConvBlock:
                cur = conv2d(cur, p.weight, p.bias, l.stride, l.padding);
                cur = batchnorm(cur, p.gamma, p.beta, p.running_mean, p.running_var, Mode::Eval);
                cur = relu(cur);
                break;
            case LayerKind::MaxPool:
                cur = maxpool2x2(cur);
                break;
            case LayerKind::GlobalAvgPool:
                cur = global_avgpool(cur);
                break;
            case LayerKind::Dense:
                cur = dense(cur, p.weight, p.bias);
                break;
            case LayerKind::ResidualAdd:
                cur = elementwise_add(cur, outputs[l.from]);
                break;
        }
        const size_t m = merge_for_layer[i];
        if (m != SIZE_MAX) {
            if (next_msg >= inbox.size())
                throw ProtocolError(strcat_msg("merge point ", m, ": missing message"));
            const Message& msg = inbox[next_msg];
            if (msg.merge_point != static_cast<int64_t>(m) ||
                msg.sequence != static_cast<int64_t>(next_msg))
                throw ProtocolError(strcat_msg("merge point ", m, ": out-of-order message (got ",
                                               "merge point ", msg.merge_point, ", sequence ",
                                               msg.sequence, ")"));
            ++next_msg;
            auto r = Tensor<float>::from(msg.shape, msg.payload);
            r = gather_channels(r, bundle_.alignment_maps[m]);
            if (r->shape != cur->shape)
                throw ProtocolError(strcat_msg("merge point ", m, ": aligned payload shape ",
                                               shape_to_string(r->shape), " does not match ",
                                               shape_to_string(cur->shape)));
            cur = elementwise_add(cur, r);
        }
        outputs.push_back(cur);
    }
    if (next_msg != inbox.size())
        throw ProtocolError(strcat_msg("inbox holds ", inbox.size() - next_msg,
                                       " unconsumed messages"));

    Output out;
    out.logits = cur->data;
    out.predicted = static_cast<int64_t>(
        std::max_element(out.logits.begin(), out.logits.end()) - out.logits.begin());
    return out;
}

SplitRuntime::SplitRuntime(ReeContext ree, TeeContext tee)
    : ree_(std::move(ree)), tee_(std::move(tee)) {
    send_schedule_.reserve(tee_.merge_points().size());
    for (const MergePoint& mp : tee_.merge_points()) send_schedule_.push_back(mp.src_layer);
}

SplitRuntime SplitRuntime::deploy(const std::string& ree_file, const std::string& tee_file) {
    ReeContext ree(ree_file);
    TeeContext tee(tee_file);
    return SplitRuntime(std::move(ree), std::move(tee));
}

SplitPrediction SplitRuntime::infer(const TensorPtr<float>& x) {
    SplitPrediction result;
    auto messages = ree_.run(x, send_schedule_);
    for (const Message& m : messages) {
        result.audit.append(Direction::ReeToTee, m.merge_point, m.byte_size(), true);
        session_audit_.append(Direction::ReeToTee, m.merge_point, m.byte_size(), true);
    }
    auto out = tee_.run(x, messages);
    const int64_t out_bytes =
        static_cast<int64_t>(out.logits.size()) * 4 + kMessageHeaderBytes;
    result.audit.append(Direction::TeeToUser, -1, out_bytes, true);
    session_audit_.append(Direction::TeeToUser, -1, out_bytes, true);
    result.predicted = out.predicted;
    result.logits = std::move(out.logits);
    for (const Message& m : messages) result.report.message_bytes_per_inference += m.byte_size();
    const auto ree_rc = count_resources(ree_.graph());
    const auto tee_rc = count_resources(tee_.graph());
    result.report.ree_param_bytes = ree_rc.param_bytes;
    result.report.tee_param_bytes = tee_rc.param_bytes;
    result.report.ree_macs = ree_rc.macs_per_inference;
    result.report.tee_macs = tee_rc.macs_per_inference;
    return result;
}

ResourceReport SplitRuntime::resource_report(const std::string& victim_file) const {
    const auto victim = load_victim(victim_file);
    const auto victim_rc = count_resources(victim);
    const auto ree_rc = count_resources(ree_.graph());
    const auto tee_rc = count_resources(tee_.graph());

    ResourceReport r;
    r.ree_param_bytes = ree_rc.param_bytes;
    r.tee_param_bytes = tee_rc.param_bytes;
    r.ree_macs = ree_rc.macs_per_inference;
    r.tee_macs = tee_rc.macs_per_inference;
    r.baseline_tee_param_bytes = victim_rc.param_bytes;
    r.baseline_tee_macs = victim_rc.macs_per_inference;

    auto shapes = layer_output_shapes(ree_.graph());
    for (const MergePoint& mp : tee_.merge_points()) {
        const Shape& s = shapes[mp.src_layer];
        r.message_bytes_per_inference += shape_numel(s) * 4 + kMessageHeaderBytes;
    }
    r.memory_reduction_ratio = static_cast<double>(r.baseline_tee_param_bytes) /
                               static_cast<double>(r.tee_param_bytes);
    r.mac_reduction_ratio =
        static_cast<double>(r.baseline_tee_macs) / static_cast<double>(r.tee_macs);
    return r;
}

} // namespace tbnet
