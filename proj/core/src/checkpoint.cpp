#include "adasam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "adasam/error.hpp"

namespace adasam {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void write_blob(const std::filesystem::path& path, const torch::Tensor& tensor) {
    auto t = tensor.detach().to(torch::kFloat32).contiguous();
    std::vector<std::uint32_t> words(static_cast<std::size_t>(t.numel()));
    std::memcpy(words.data(), t.data_ptr<float>(), words.size() * sizeof(float));
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& w : words) w = __builtin_bswap32(w);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open tensor blob for writing", path.string());
    out.write(reinterpret_cast<const char*>(words.data()),
              static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
    if (!out) throw IoError("failed writing tensor blob", path.string());
}

void read_blob(const std::filesystem::path& path, torch::Tensor& target) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open tensor blob", path.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    const auto expected = static_cast<std::size_t>(target.numel()) * sizeof(float);
    if (bytes != expected) {
        throw IoError("tensor blob size " + std::to_string(bytes) + " != expected " + std::to_string(expected),
                      path.string());
    }
    in.seekg(0);
    std::vector<std::uint32_t> words(static_cast<std::size_t>(target.numel()));
    in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& w : words) w = __builtin_bswap32(w);
    }
    torch::NoGradGuard guard;
    auto host = torch::empty_like(target);
    std::memcpy(host.data_ptr<float>(), words.data(), bytes);
    target.copy_(host);
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open", path.string());
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed json (") + e.what() + ")", path.string());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing", path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing", path.string());
}

template <typename Fn>
void for_each_tensor(AdaSam& model, Fn&& fn) {
    for (auto& item : model->named_parameters(true)) fn(item.key(), item.value());
    for (auto& item : model->named_buffers(true)) fn(item.key(), item.value());
}

}  // namespace

void save_checkpoint(AdaSam& model, const std::filesystem::path& dir, const nlohmann::json& extra) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "tensors", ec);
    if (ec) throw IoError("cannot create checkpoint directory (" + ec.message() + ")", dir.string());

    nlohmann::json config = {{"model", model->config()},
                             {"lora_merged", model->lora_merged()},
                             {"format_version", 1},
                             {"extra", extra}};
    write_json(dir / "config.json", config);

    nlohmann::json index = nlohmann::json::object();
    for_each_tensor(model, [&](const std::string& name, const torch::Tensor& t) {
        const std::string file = "tensors/" + name + ".f32";
        write_blob(dir / file, t);
        index[name] = {{"file", file}, {"shape", t.sizes().vec()}, {"dtype", "float32"}};
    });
    write_json(dir / "index.json", index);
}

AdaSam load_checkpoint(const std::filesystem::path& dir) {
    auto config = read_json(dir / "config.json");
    auto model = make_model(config.at("model").get<ModelConfig>());
    auto index = read_json(dir / "index.json");
    for_each_tensor(model, [&](const std::string& name, torch::Tensor& t) {
        if (!index.contains(name)) throw IoError("checkpoint index lacks tensor " + name, dir.string());
        const auto& entry = index.at(name);
        if (entry.at("shape").get<std::vector<int64_t>>() != t.sizes().vec()) {
            throw IoError("shape mismatch for tensor " + name, dir.string());
        }
        read_blob(dir / entry.at("file").get<std::string>(), t);
    });
    model->set_lora_merged_flag(config.value("lora_merged", false));
    model->eval();
    return model;
}

nlohmann::json read_checkpoint_extra(const std::filesystem::path& dir) {
    return read_json(dir / "config.json").value("extra", nlohmann::json::object());
}

}  // namespace adasam
