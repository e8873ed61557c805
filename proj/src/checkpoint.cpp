#include "maskgrid/checkpoint.hpp"

#include <bit>
#include <fstream>

#include <json.hpp>

namespace maskgrid {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; byte-swapped platforms are unsupported");

using nlohmann::json;

template <typename T>
nk::Tensor<T>& NamedTensors<T>::at(const std::string& name) {
    for (auto& [n, t] : entries)
        if (n == name) return t;
    throw checkpoint_error("no tensor named '" + name + "'");
}

template <typename T>
const nk::Tensor<T>& NamedTensors<T>::at(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw checkpoint_error("no tensor named '" + name + "'");
}

template <typename T>
bool NamedTensors<T>::contains(const std::string& name) const {
    for (const auto& [n, t] : entries)
        if (n == name) return true;
    return false;
}

template <typename T>
void NamedTensors<T>::add(std::string name, nk::Tensor<T> t) {
    if (contains(name)) throw checkpoint_error("duplicate tensor name '" + name + "'");
    entries.emplace_back(std::move(name), std::move(t));
}

namespace {

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>)
        return "f32";
    else
        return "f64";
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& prefix, const NamedTensors<T>& tensors, const std::string& meta_json) {
    json manifest;
    manifest["dtype"] = dtype_name<T>();
    manifest["meta"] = json::parse(meta_json);
    json list = json::array();
    for (const auto& [name, t] : tensors.entries) {
        list.push_back({{"name", name}, {"shape", t.shape}});
    }
    manifest["tensors"] = std::move(list);

    {
        std::ofstream mf(prefix + ".json");
        if (!mf) throw io_error("cannot write " + prefix + ".json");
        mf << manifest.dump(2) << "\n";
    }
    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw io_error("cannot write " + prefix + ".bin");
    for (const auto& [name, t] : tensors.entries) {
        bf.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(sizeof(T) * t.numel()));
    }
    if (!bf) throw io_error("short write to " + prefix + ".bin");
}

template <typename T>
NamedTensors<T> load_checkpoint(const std::string& prefix, std::string* meta_json_out) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw io_error("cannot open " + prefix + ".json");
    json manifest = json::parse(mf);
    if (manifest.at("dtype").get<std::string>() != dtype_name<T>())
        throw checkpoint_error("checkpoint dtype is " + manifest.at("dtype").get<std::string>() +
                               ", expected " + dtype_name<T>());
    if (meta_json_out) *meta_json_out = manifest.at("meta").dump();

    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw io_error("cannot open " + prefix + ".bin");

    NamedTensors<T> out;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        nk::Shape shape = entry.at("shape").get<std::vector<int64_t>>();
        nk::Tensor<T> t = nk::Tensor<T>::zeros(shape);
        bf.read(reinterpret_cast<char*>(t.mut_ptr()), static_cast<std::streamsize>(sizeof(T) * t.numel()));
        if (!bf) throw checkpoint_error("blob truncated while reading '" + name + "'");
        out.add(name, std::move(t));
    }
    // trailing bytes mean the manifest and blob disagree
    bf.peek();
    if (!bf.eof()) throw checkpoint_error("blob larger than manifest describes");
    return out;
}

std::string checkpoint_dtype(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw io_error("cannot open " + prefix + ".json");
    json manifest = json::parse(mf);
    return manifest.at("dtype").get<std::string>();
}

template struct NamedTensors<float>;
template struct NamedTensors<double>;
template void save_checkpoint<float>(const std::string&, const NamedTensors<float>&, const std::string&);
template void save_checkpoint<double>(const std::string&, const NamedTensors<double>&, const std::string&);
template NamedTensors<float> load_checkpoint<float>(const std::string&, std::string*);
template NamedTensors<double> load_checkpoint<double>(const std::string&, std::string*);

}  // namespace maskgrid
