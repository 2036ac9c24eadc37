#include "wellbench/schema.hpp"

#include <nlohmann/json.hpp>

#include "wellbench/errors.hpp"

namespace wellbench {

using nlohmann::json;

const std::vector<Dimension>& base_dimensions() {
    static const std::vector<Dimension> dims = {Dimension::PA,  Dimension::IA,
                                                Dimension::VA,  Dimension::SA,
                                                Dimension::SpA, Dimension::EA};
    return dims;
}

std::string dimension_code(Dimension d) {
    switch (d) {
        case Dimension::PA: return "PA";
        case Dimension::IA: return "IA";
        case Dimension::VA: return "VA";
        case Dimension::SA: return "SA";
        case Dimension::SpA: return "SpA";
        case Dimension::EA: return "EA";
        case Dimension::IVA: return "IVA";
        case Dimension::SpEA: return "SpEA";
    }
    throw SchemaError("unknown dimension value");
}

std::string dimension_display_name(Dimension d) {
    switch (d) {
        case Dimension::PA: return "Physical";
        case Dimension::IA: return "Intellectual";
        case Dimension::VA: return "Vocational";
        case Dimension::SA: return "Social";
        case Dimension::SpA: return "Spiritual";
        case Dimension::EA: return "Emotional";
        case Dimension::IVA: return "Intellectual and Vocational";
        case Dimension::SpEA: return "Spiritual and Emotional";
    }
    throw SchemaError("unknown dimension value");
}

Dimension dimension_from_code(const std::string& code) {
    for (Dimension d : {Dimension::PA, Dimension::IA, Dimension::VA, Dimension::SA,
                        Dimension::SpA, Dimension::EA, Dimension::IVA, Dimension::SpEA}) {
        if (dimension_code(d) == code) return d;
    }
    throw SchemaError("unknown dimension code: " + code);
}

bool is_base_dimension(Dimension d) {
    return d == Dimension::PA || d == Dimension::IA || d == Dimension::VA ||
           d == Dimension::SA || d == Dimension::SpA || d == Dimension::EA;
}

int LabelSchema::index_of(Dimension d) const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == d) return static_cast<int>(i);
    }
    return -1;
}

void LabelSchema::validate() const {
    if (labels.size() < 2 || labels.size() > 6) {
        throw SchemaError("schema size must be in [2, 6], got " +
                          std::to_string(labels.size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            if (labels[i] == labels[j]) {
                throw SchemaError("duplicate label in schema: " +
                                  dimension_code(labels[i]));
            }
        }
    }
    for (Dimension base : base_dimensions()) {
        auto it = merge_map.find(base);
        if (it == merge_map.end()) {
            throw SchemaError("merge_map not total: missing base code " +
                              dimension_code(base));
        }
        if (index_of(it->second) < 0) {
            throw SchemaError("merge_map target " + dimension_code(it->second) +
                              " is not a schema label");
        }
    }
}

std::string task_kind_name(TaskKind t) {
    return t == TaskKind::multi_label ? "multi_label" : "multi_class";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "multi_label") return TaskKind::multi_label;
    if (name == "multi_class") return TaskKind::multi_class;
    throw SchemaError("unknown task kind: " + name);
}

LabelVector LabelVector::multi_label(std::vector<std::uint8_t> v) {
    LabelVector out;
    out.task_kind = TaskKind::multi_label;
    out.values = std::move(v);
    return out;
}

LabelVector LabelVector::multi_class(int cls) {
    LabelVector out;
    out.task_kind = TaskKind::multi_class;
    out.class_index = cls;
    return out;
}

LabelSchema schema_for(int label_count) {
    LabelSchema schema;
    switch (label_count) {
        case 6:
            schema.labels = base_dimensions();
            for (Dimension d : base_dimensions()) schema.merge_map[d] = d;
            break;
        case 5:
            schema.labels = {Dimension::PA, Dimension::IA, Dimension::VA,
                             Dimension::SA, Dimension::SpEA};
            schema.merge_map = {{Dimension::PA, Dimension::PA},
                                {Dimension::IA, Dimension::IA},
                                {Dimension::VA, Dimension::VA},
                                {Dimension::SA, Dimension::SA},
                                {Dimension::SpA, Dimension::SpEA},
                                {Dimension::EA, Dimension::SpEA}};
            break;
        case 4:
            schema.labels = {Dimension::PA, Dimension::IVA, Dimension::SA,
                             Dimension::SpEA};
            schema.merge_map = {{Dimension::PA, Dimension::PA},
                                {Dimension::IA, Dimension::IVA},
                                {Dimension::VA, Dimension::IVA},
                                {Dimension::SA, Dimension::SA},
                                {Dimension::SpA, Dimension::SpEA},
                                {Dimension::EA, Dimension::SpEA}};
            break;
        default:
            throw SchemaError("unsupported label count: " +
                              std::to_string(label_count) +
                              " (supported: 4, 5, 6)");
    }
    schema.validate();
    return schema;
}

LabelVector merge_labels(const LabelVector& v, const LabelSchema& base,
                         const LabelSchema& target) {
    target.validate();
    if (base.size() != static_cast<std::size_t>(kBaseDimensionCount)) {
        throw SchemaError("merge_labels input must use the 6-label base schema");
    }
    if (v.task_kind == TaskKind::multi_label) {
        if (v.values.size() != base.size()) {
            throw SchemaError("label vector length " +
                              std::to_string(v.values.size()) +
                              " does not match base schema size 6");
        }
        std::vector<std::uint8_t> merged(target.size(), 0);
        for (std::size_t i = 0; i < base.labels.size(); ++i) {
            const Dimension mapped = target.merge_map.at(base.labels[i]);
            const int idx = target.index_of(mapped);
            if (idx < 0) throw SchemaError("merge target not in schema");
            if (v.values[i]) merged[static_cast<std::size_t>(idx)] = 1;
        }
        return LabelVector::multi_label(std::move(merged));
    }
    if (v.class_index < 0 || v.class_index >= static_cast<int>(base.size())) {
        throw SchemaError("class index out of range for base schema");
    }
    const Dimension mapped =
        target.merge_map.at(base.labels[static_cast<std::size_t>(v.class_index)]);
    const int idx = target.index_of(mapped);
    if (idx < 0) throw SchemaError("merge target not in schema");
    return LabelVector::multi_class(idx);
}

std::string schema_to_json(const LabelSchema& schema) {
    json j;
    j["labels"] = json::array();
    for (Dimension d : schema.labels) j["labels"].push_back(dimension_code(d));
    j["merge_map"] = json::object();
    for (const auto& [from, to] : schema.merge_map) {
        j["merge_map"][dimension_code(from)] = dimension_code(to);
    }
    return j.dump();
}

LabelSchema schema_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("schema config is not valid JSON: ") + e.what());
    }
    if (!j.contains("labels") || !j["labels"].is_array() ||
        !j.contains("merge_map") || !j["merge_map"].is_object()) {
        throw SchemaError("schema config requires 'labels' array and 'merge_map' object");
    }
    LabelSchema schema;
    for (const auto& item : j["labels"]) {
        schema.labels.push_back(dimension_from_code(item.get<std::string>()));
    }
    for (const auto& [key, value] : j["merge_map"].items()) {
        schema.merge_map[dimension_from_code(key)] =
            dimension_from_code(value.get<std::string>());
    }
    schema.validate();
    return schema;
}

}  // namespace wellbench
